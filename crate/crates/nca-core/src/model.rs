//! The cell rule: one residual update applied synchronously to every
//! grid cell, iterated into rollouts.
//!
//! A world state is an `[h, w, d]` tensor whose first four channels are
//! RGBA at readout and whose remaining channels are latent. One
//! iteration computes `state + conv1x1(relu(conv3x3(state)))` with zero
//! padding, the same weights at every position. Two restrictions follow
//! directly from that form: a cell only ever reads its 3x3 neighborhood,
//! and every cell runs the same program.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{kernels, Tensor};

/// Default world-state depth.
pub const DEFAULT_DEPTH: usize = 16;
/// Default hidden width between the two convolutions.
pub const DEFAULT_HIDDEN: usize = 128;

/// An `[h, w, d]` grid of cell state vectors, `d >= 5`.
#[derive(Clone, Debug)]
pub struct WorldState {
    grid: Tensor,
}

impl WorldState {
    pub fn new(grid: Tensor) -> Result<Self> {
        let (_, _, d) = grid.hwc()?;
        if d < 5 {
            return Err(Error::config(format!(
                "world state depth must be at least 5, got {d}"
            )));
        }
        Ok(WorldState { grid })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Result<Self> {
        WorldState::new(Tensor::zeros(vec![h, w, d]))
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }

    pub fn depth(&self) -> usize {
        self.grid.shape[2]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.grid.shape[0], self.grid.shape[1])
    }
}

/// Weights of the two-layer cell rule.
///
/// `w_perc` is the `[3, 3, d, f]` perception convolution, `w_out` the
/// `[f, d]` mixing convolution. With the defaults (d = 16, f = 128) the
/// rule has 20,624 parameters.
#[derive(Clone, Debug)]
pub struct NcaParams {
    pub w_perc: Tensor,
    pub b_perc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Tape handles for one registration of [`NcaParams`].
#[derive(Clone, Copy, Debug)]
pub struct TracedNca {
    pub w_perc: NodeId,
    pub b_perc: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl NcaParams {
    pub fn zeros(depth: usize, hidden: usize) -> Self {
        NcaParams {
            w_perc: Tensor::zeros(vec![3, 3, depth, hidden]),
            b_perc: Tensor::zeros(vec![hidden]),
            w_out: Tensor::zeros(vec![hidden, depth]),
            b_out: Tensor::zeros(vec![depth]),
        }
    }

    /// He-initialized perception, zeroed output layer. The zero output
    /// layer makes the initial rule an identity, so untrained rollouts
    /// keep their seed instead of exploding.
    pub fn init(depth: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (9.0 * depth as f32)).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let mut p = NcaParams::zeros(depth, hidden);
        for v in &mut p.w_perc.data {
            *v = normal.sample(rng);
        }
        p
    }

    pub fn depth(&self) -> usize {
        self.w_perc.shape[2]
    }

    pub fn hidden(&self) -> usize {
        self.w_perc.shape[3]
    }

    /// 9*d*f + f + f*d + d.
    pub fn param_count(&self) -> usize {
        self.w_perc.numel() + self.b_perc.numel() + self.w_out.numel() + self.b_out.numel()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_perc, &self.b_perc, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_perc,
            &mut self.b_perc,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Registers the parameters on a tape, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TracedNca {
        let mut reg = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        TracedNca {
            w_perc: reg(&self.w_perc),
            b_perc: reg(&self.b_perc),
            w_out: reg(&self.w_out),
            b_out: reg(&self.b_out),
        }
    }
}

/// All states of a rollout when recorded, otherwise just the final one.
#[derive(Debug)]
pub struct RolloutTrace {
    pub states: Vec<WorldState>,
    pub iterations: u32,
}

impl RolloutTrace {
    pub fn final_state(&self) -> &WorldState {
        self.states.last().expect("trace is never empty")
    }
}

fn check_depth(state: &WorldState, params: &NcaParams) -> Result<()> {
    if state.depth() != params.depth() {
        return Err(Error::config(format!(
            "state depth {} does not match rule depth {}",
            state.depth(),
            params.depth()
        )));
    }
    Ok(())
}

/// One synchronous update of every cell.
pub fn nca_step(state: &WorldState, params: &NcaParams) -> Result<WorldState> {
    check_depth(state, params)?;
    let (h, w, d) = state.grid.hwc()?;
    let f = params.hidden();
    let mut hid = kernels::conv3x3_forward(
        &state.grid.data,
        h,
        w,
        d,
        &params.w_perc.data,
        &params.b_perc.data,
        f,
        1,
    );
    for v in &mut hid {
        *v = v.max(0.0);
    }
    let upd = kernels::conv1x1_forward(&hid, h * w, f, &params.w_out.data, &params.b_out.data, d);
    let mut out = state.grid.clone();
    for (o, u) in out.data.iter_mut().zip(&upd) {
        *o += u;
    }
    WorldState::new(out)
}

/// Applies [`nca_step`] `n` times. With `record`, every intermediate
/// state is retained for frame export.
pub fn nca_rollout(
    seed: &WorldState,
    params: &NcaParams,
    n: u32,
    record: bool,
) -> Result<RolloutTrace> {
    if n == 0 {
        return Err(Error::usage("rollout needs at least one iteration"));
    }
    let mut states = Vec::with_capacity(if record { n as usize + 1 } else { 1 });
    let mut current = seed.clone();
    if record {
        states.push(current.clone());
    }
    for _ in 0..n {
        current = nca_step(&current, params)?;
        if record {
            states.push(current.clone());
        }
    }
    if !record {
        states.push(current);
    }
    Ok(RolloutTrace {
        states,
        iterations: n,
    })
}

/// One cell-rule update recorded on a tape.
pub fn nca_step_traced(tape: &mut Tape, state: NodeId, p: &TracedNca) -> Result<NodeId> {
    let hid = tape.conv3x3(state, p.w_perc, p.b_perc)?;
    let act = tape.relu(hid);
    let upd = tape.conv1x1(act, p.w_out, p.b_out)?;
    tape.add(state, upd)
}

/// Recorded rollout; returns all n + 1 state nodes including the seed.
pub fn nca_rollout_traced(
    tape: &mut Tape,
    seed: NodeId,
    p: &TracedNca,
    n: u32,
) -> Result<Vec<NodeId>> {
    if n == 0 {
        return Err(Error::usage("rollout needs at least one iteration"));
    }
    let mut states = Vec::with_capacity(n as usize + 1);
    states.push(seed);
    let mut current = seed;
    for _ in 0..n {
        current = nca_step_traced(tape, current, p)?;
        states.push(current);
    }
    Ok(states)
}

/// Uniform iteration count in `[lo, hi]`.
pub fn sample_iterations(rng: &mut impl Rng, lo: u32, hi: u32) -> Result<u32> {
    if lo < 1 || lo > hi {
        return Err(Error::config(format!(
            "iteration range [{lo}, {hi}] is invalid"
        )));
    }
    Ok(rng.gen_range(lo..=hi))
}

/// Builds a world state from a grayscale edge image: the edge intensity
/// goes into all four RGBA channels, latent channels start at zero.
pub fn build_seed(edge: &Tensor, depth: usize) -> Result<WorldState> {
    let (h, w, c) = edge.hwc()?;
    if c != 1 {
        return Err(Error::config(format!(
            "seed edge image must have one channel, got {c}"
        )));
    }
    if depth < 5 {
        return Err(Error::config(format!(
            "world state depth must be at least 5, got {depth}"
        )));
    }
    let mut grid = Tensor::zeros(vec![h, w, depth]);
    for (p, &e) in edge.data.iter().enumerate() {
        for k in 0..4 {
            grid.data[p * depth + k] = e;
        }
    }
    WorldState::new(grid)
}

/// RGBA readout clamped to [0, 1] for export.
pub fn extract_rgba(state: &WorldState) -> Tensor {
    let mut t = extract_rgba_raw(state);
    for v in &mut t.data {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

/// RGBA readout without clamping, for losses.
pub fn extract_rgba_raw(state: &WorldState) -> Tensor {
    let (h, w, d) = state.grid.hwc().expect("world states are [h, w, d]");
    let mut t = Tensor::zeros(vec![h, w, 4]);
    for p in 0..h * w {
        t.data[p * 4..p * 4 + 4].copy_from_slice(&state.grid.data[p * d..p * d + 4]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_state(h: usize, w: usize, d: usize, seed: u64) -> WorldState {
        let mut rng = stream(seed, "test-state");
        let mut grid = Tensor::zeros(vec![h, w, d]);
        for v in &mut grid.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        WorldState::new(grid).unwrap()
    }

    #[test]
    fn parameter_count_formula_and_default() {
        for (d, f) in [(16, 128), (8, 32), (5, 7)] {
            let p = NcaParams::zeros(d, f);
            assert_eq!(p.param_count(), 9 * d * f + f + f * d + d);
        }
        let p = NcaParams::zeros(DEFAULT_DEPTH, DEFAULT_HIDDEN);
        assert_eq!(p.param_count(), 20_624);
    }

    #[test]
    fn zero_params_step_is_identity() {
        let s = random_state(6, 5, 16, 3);
        let p = NcaParams::zeros(16, 128);
        let out = nca_step(&s, &p).unwrap();
        assert_eq!(out.grid().data, s.grid().data);
    }

    #[test]
    fn zero_params_rollout_keeps_seed() {
        let s = random_state(4, 4, 8, 9);
        let p = NcaParams::zeros(8, 16);
        let trace = nca_rollout(&s, &p, 7, false).unwrap();
        assert_eq!(trace.final_state().grid().data, s.grid().data);
    }

    #[test]
    fn rollout_of_one_equals_single_step() {
        let s = random_state(5, 5, 8, 11);
        let p = NcaParams::init(8, 16, &mut stream(1, "p"));
        let trace = nca_rollout(&s, &p, 1, false).unwrap();
        let step = nca_step(&s, &p).unwrap();
        assert_eq!(trace.final_state().grid().data, step.grid().data);
    }

    #[test]
    fn rollout_composes() {
        let s = random_state(5, 5, 8, 13);
        let mut p = NcaParams::init(8, 16, &mut stream(2, "p"));
        // Give the output layer some weight so steps actually move.
        for (i, v) in p.w_out.data.iter_mut().enumerate() {
            *v = ((i % 13) as f32 - 6.0) * 0.002;
        }
        let whole = nca_rollout(&s, &p, 5, false).unwrap();
        let first = nca_rollout(&s, &p, 2, false).unwrap();
        let rest = nca_rollout(first.final_state(), &p, 3, false).unwrap();
        assert_eq!(
            whole.final_state().grid().data,
            rest.final_state().grid().data
        );
    }

    #[test]
    fn rollout_rejects_zero_iterations() {
        let s = random_state(3, 3, 8, 5);
        let p = NcaParams::zeros(8, 16);
        assert!(nca_rollout(&s, &p, 0, false).is_err());
    }

    #[test]
    fn recorded_rollout_has_n_plus_one_states() {
        let s = random_state(3, 3, 8, 5);
        let p = NcaParams::zeros(8, 16);
        let trace = nca_rollout(&s, &p, 4, true).unwrap();
        assert_eq!(trace.states.len(), 5);
        assert_eq!(trace.iterations, 4);
    }

    #[test]
    fn depth_mismatch_is_a_config_error() {
        let s = random_state(3, 3, 8, 5);
        let p = NcaParams::zeros(16, 32);
        assert!(nca_step(&s, &p).is_err());
    }

    #[test]
    fn translation_equivariance_in_the_interior() {
        let p = NcaParams::init(8, 24, &mut stream(4, "p"));
        let s = random_state(8, 8, 8, 21);
        // Shift the state one cell down-right.
        let (h, w, d) = s.grid().hwc().unwrap();
        let mut shifted = Tensor::zeros(vec![h, w, d]);
        for y in 1..h {
            for x in 1..w {
                for c in 0..d {
                    shifted.data[(y * w + x) * d + c] =
                        s.grid().data[((y - 1) * w + (x - 1)) * d + c];
                }
            }
        }
        let shifted = WorldState::new(shifted).unwrap();
        let out = nca_step(&s, &p).unwrap();
        let out_shifted = nca_step(&shifted, &p).unwrap();
        // Compare at least two cells away from every border.
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                for c in 0..d {
                    let a = out.grid().data[((y - 1) * w + (x - 1)) * d + c];
                    let b = out_shifted.grid().data[(y * w + x) * d + c];
                    assert_eq!(a, b, "cell ({y},{x}) channel {c}");
                }
            }
        }
    }

    #[test]
    fn single_step_locality_is_one_cell() {
        let p = NcaParams::init(8, 24, &mut stream(6, "p"));
        let s = random_state(9, 9, 8, 33);
        let mut perturbed = s.clone();
        let (h, w, d) = s.grid().hwc().unwrap();
        let (py, px) = (4usize, 5usize);
        perturbed.grid.data[(py * w + px) * d + 2] += 0.5;
        let a = nca_step(&s, &p).unwrap();
        let b = nca_step(&perturbed, &p).unwrap();
        for y in 0..h {
            for x in 0..w {
                let changed = (0..d).any(|c| {
                    a.grid().data[(y * w + x) * d + c] != b.grid().data[(y * w + x) * d + c]
                });
                let near = y.abs_diff(py) <= 1 && x.abs_diff(px) <= 1;
                assert!(
                    near || !changed,
                    "cell ({y},{x}) changed outside the 3x3 neighborhood"
                );
            }
        }
    }

    #[test]
    fn locality_radius_grows_at_most_one_per_iteration() {
        let p = NcaParams::init(8, 16, &mut stream(8, "p"));
        let s = random_state(11, 11, 8, 44);
        let mut perturbed = s.clone();
        let (h, w, d) = s.grid().hwc().unwrap();
        let (py, px) = (5usize, 5usize);
        perturbed.grid.data[(py * w + px) * d] += 1.0;
        let n = 3;
        let a = nca_rollout(&s, &p, n, false).unwrap();
        let b = nca_rollout(&perturbed, &p, n, false).unwrap();
        for y in 0..h {
            for x in 0..w {
                let changed = (0..d).any(|c| {
                    a.final_state().grid().data[(y * w + x) * d + c]
                        != b.final_state().grid().data[(y * w + x) * d + c]
                });
                let chebyshev = y.abs_diff(py).max(x.abs_diff(px));
                assert!(
                    chebyshev <= n as usize || !changed,
                    "cell ({y},{x}) changed at Chebyshev distance {chebyshev} after {n} iterations"
                );
            }
        }
    }

    #[test]
    fn weight_sharing_identical_neighborhoods_update_identically() {
        let p = NcaParams::init(8, 16, &mut stream(10, "p"));
        // A state with two disjoint copies of the same 3x3 patch.
        let mut grid = Tensor::zeros(vec![10, 10, 8]);
        let mut rng = stream(12, "patch");
        let patch: Vec<f32> = (0..9 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        for (dy, dx) in (0..3).flat_map(|a| (0..3).map(move |b| (a, b))) {
            for c in 0..8 {
                let v = patch[(dy * 3 + dx) * 8 + c];
                grid.data[((1 + dy) * 10 + 1 + dx) * 8 + c] = v;
                grid.data[((6 + dy) * 10 + 6 + dx) * 8 + c] = v;
            }
        }
        let s = WorldState::new(grid).unwrap();
        let out = nca_step(&s, &p).unwrap();
        for c in 0..8 {
            let a = out.grid().data[(2 * 10 + 2) * 8 + c];
            let b = out.grid().data[(7 * 10 + 7) * 8 + c];
            assert_eq!(a, b, "channel {c}");
        }
    }

    #[test]
    fn traced_step_matches_untraced() {
        let p = NcaParams::init(8, 16, &mut stream(14, "p"));
        let s = random_state(6, 6, 8, 55);
        let plain = nca_step(&s, &p).unwrap();
        let mut tape = Tape::new();
        let tp = p.register(&mut tape, true);
        let seed = tape.constant(s.grid().clone());
        let out = nca_step_traced(&mut tape, seed, &tp).unwrap();
        assert_eq!(tape.value(out).data, plain.grid().data);
    }

    #[test]
    fn sample_iterations_degenerate_range() {
        let mut rng = stream(1, "iters");
        assert_eq!(sample_iterations(&mut rng, 60, 60).unwrap(), 60);
    }

    #[test]
    fn sample_iterations_stays_in_range() {
        let mut rng = stream(2, "iters");
        for _ in 0..1000 {
            let n = sample_iterations(&mut rng, 50, 60).unwrap();
            assert!((50..=60).contains(&n));
        }
    }

    #[test]
    fn sample_iterations_rejects_bad_range() {
        let mut rng = stream(3, "iters");
        assert!(sample_iterations(&mut rng, 5, 4).is_err());
        assert!(sample_iterations(&mut rng, 0, 4).is_err());
    }

    #[test]
    fn sample_iterations_is_uniform() {
        // Chi-squared over 11 bins; 23.209 is the df = 10 cutoff at p = 0.01.
        let mut rng = stream(4, "iters");
        let draws = 10_000;
        let mut counts = [0u32; 11];
        for _ in 0..draws {
            let n = sample_iterations(&mut rng, 50, 60).unwrap();
            counts[(n - 50) as usize] += 1;
        }
        let expected = draws as f64 / 11.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 23.209, "chi-squared {chi2}");
    }

    #[test]
    fn build_seed_zero_edge_is_zero_state() {
        let edge = Tensor::zeros(vec![4, 4, 1]);
        let s = build_seed(&edge, 16).unwrap();
        assert!(s.grid().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_seed_writes_edges_into_rgba() {
        let mut edge = Tensor::zeros(vec![2, 2, 1]);
        edge.data[1] = 1.0;
        let s = build_seed(&edge, 8).unwrap();
        for k in 0..4 {
            assert_eq!(s.grid().data[8 + k], 1.0);
        }
        for k in 4..8 {
            assert_eq!(s.grid().data[8 + k], 0.0);
        }
        assert_eq!(s.grid().data[0], 0.0);
    }

    #[test]
    fn build_seed_round_trips_through_extract() {
        let mut edge = Tensor::zeros(vec![3, 3, 1]);
        for (i, v) in edge.data.iter_mut().enumerate() {
            *v = (i % 2) as f32;
        }
        let s = build_seed(&edge, 16).unwrap();
        let rgba = extract_rgba(&s);
        for p in 0..9 {
            for k in 0..4 {
                assert_eq!(rgba.data[p * 4 + k], edge.data[p]);
            }
        }
    }

    #[test]
    fn extract_rgba_clamps_and_raw_does_not() {
        let mut s = WorldState::zeros(1, 1, 8).unwrap();
        s.grid.data[0] = 2.0;
        s.grid.data[3] = -0.5;
        let clamped = extract_rgba(&s);
        assert_eq!(clamped.data[0], 1.0);
        assert_eq!(clamped.data[3], 0.0);
        let raw = extract_rgba_raw(&s);
        assert_eq!(raw.data[0], 2.0);
        assert_eq!(raw.data[3], -0.5);
    }

    #[test]
    fn build_seed_rejects_shallow_depth() {
        let edge = Tensor::zeros(vec![2, 2, 1]);
        assert!(build_seed(&edge, 4).is_err());
    }
}
