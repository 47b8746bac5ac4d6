//! Deterministic random streams.
//!
//! Every command seeds one generator and derives independent streams per
//! purpose ("data", "iters", "noise", ...), so adding a consumer to one
//! stream never perturbs the draws of another. Streams can also be
//! derived per step, which makes a resumed run replay the exact
//! randomness of an uninterrupted one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to map stream labels to numbers.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// An independent stream for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// An independent stream for `(seed, label, step)`.
pub fn step_stream(seed: u64, label: &str, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label) ^ step.wrapping_mul(0x9e3779b97f4a7c15));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_and_label_reproduces() {
        let a: Vec<u32> = stream(7, "data").sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<u32> = stream(7, "data").sample_iter(rand::distributions::Standard).take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_are_independent() {
        let a: u64 = stream(7, "data").gen();
        let b: u64 = stream(7, "noise").gen();
        assert_ne!(a, b);
    }

    #[test]
    fn steps_are_independent() {
        let a: u64 = step_stream(7, "iters", 1).gen();
        let b: u64 = step_stream(7, "iters", 2).gen();
        assert_ne!(a, b);
    }
}
