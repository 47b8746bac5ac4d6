mod nca_core_tests_oracle {
#![allow(dead_code)]
use nca_core::model::NcaParams;
pub struct F64Nca {
    pub depth: usize,
    pub hidden: usize,
    pub w_perc: Vec<f64>,
    pub b_perc: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl F64Nca {
    pub fn from_params(p: &NcaParams) -> Self {
        let up = |t: &nca_core::Tensor| t.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        F64Nca {
            depth: p.depth(),
            hidden: p.hidden(),
            w_perc: up(&p.w_perc),
            b_perc: up(&p.b_perc),
            w_out: up(&p.w_out),
            b_out: up(&p.b_out),
        }
    }

    /// Parameter tensors in the same fixed order as `NcaParams::tensors`.
    pub fn tensor_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        match idx {
            0 => &mut self.w_perc,
            1 => &mut self.b_perc,
            2 => &mut self.w_out,
            _ => &mut self.b_out,
        }
    }

    fn step(&self, state: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (d, f) = (self.depth, self.hidden);
        let mut hid = vec![0.0f64; h * w * f];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let acc = &mut hid[(y as usize * w + x as usize) * f..][..f];
                acc.copy_from_slice(&self.b_perc);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let px = &state[(yy as usize * w + xx as usize) * d..][..d];
                        let tap = ((dy + 1) * 3 + dx + 1) as usize;
                        for (i, &s) in px.iter().enumerate() {
                            let wrow = &self.w_perc[(tap * d + i) * f..][..f];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += s * wv;
                            }
                        }
                    }
                }
            }
        }
        for v in &mut hid {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut out = state.to_vec();
        for p in 0..h * w {
            let hrow = &hid[p * f..][..f];
            let orow = &mut out[p * d..][..d];
            for c in 0..d {
                let mut acc = self.b_out[c];
                for (i, &hv) in hrow.iter().enumerate() {
                    acc += hv * self.w_out[i * d + c];
                }
                orow[c] += acc;
            }
        }
        out
    }

    /// Mean squared RGBA error after `n` iterations from `seed`.
    pub fn rollout_mse(
        &self,
        seed: &[f64],
        h: usize,
        w: usize,
        n: u32,
        target_rgba: &[f64],
    ) -> f64 {
        let mut state = seed.to_vec();
        for _ in 0..n {
            state = self.step(&state, h, w);
        }
        let mut sum = 0.0;
        for p in 0..h * w {
            for k in 0..4 {
                let d = state[p * self.depth + k] - target_rgba[p * 4 + k];
                sum += d * d;
            }
        }
        sum / (h * w * 4) as f64
    }
}

}
// scratch: inspect worst finite-difference disagreements on the rollout
use nca_core::model::{nca_rollout_traced, NcaParams};
use nca_core::rng::stream;
use nca_core::tensor::tape::Tape;
use nca_core::Tensor;
use rand::Rng;

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = stream(seed, "gradcheck");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn main() {
    let (h, w, d, f, n) = (6usize, 6usize, 16usize, 128usize, 3u32);
    let mut params = NcaParams::init(d, f, &mut stream(17, "p"));
    let mut rng = stream(18, "w_out");
    for v in &mut params.w_out.data { *v = rng.gen_range(-0.05..0.05); }
    let seed_grid = random_tensor(vec![h, w, d], 19, -0.3, 0.8);
    let target = random_tensor(vec![h, w, 4], 20, 0.0, 1.0);

    // autodiff grads
    let mut tape = Tape::new();
    let mut reg = params.clone();
    for t in reg.tensors_mut() { t.requires_grad = true; }
    let traced = reg.register(&mut tape, true);
    let seed = tape.constant(seed_grid.clone());
    let states = nca_rollout_traced(&mut tape, seed, &traced, n).unwrap();
    let rgba = tape.slice_rgba(*states.last().unwrap()).unwrap();
    let tgt = tape.constant(target.clone());
    let loss = tape.mse_loss(rgba, tgt).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let ad: Vec<Tensor> = [traced.w_perc, traced.b_perc, traced.w_out, traced.b_out]
        .iter().map(|&id| grads.take(id).unwrap()).collect();

    // f64 oracle FD at several h for sampled coords
    let seed64: Vec<f64> = seed_grid.data.iter().map(|&v| v as f64).collect();
    let target64: Vec<f64> = target.data.iter().map(|&v| v as f64).collect();
    let mut rng = stream(21, "coords");
    let names = ["w_perc", "b_perc", "w_out", "b_out"];
    let mut stats = vec![];
    for (ti, t) in ad.iter().enumerate() {
        for _ in 0..40.min(t.numel()) {
            let ci = rng.gen_range(0..t.numel());
            let mut fds = vec![];
            for hh in [1e-3f64, 3e-3, 1e-2] {
                let mut o = nca_core_tests_oracle::F64Nca::from_params(&params);
                let base = o.tensor_mut(ti)[ci];
                o.tensor_mut(ti)[ci] = base + hh;
                let plus = o.rollout_mse(&seed64, h, w, n, &target64);
                o.tensor_mut(ti)[ci] = base - hh;
                let minus = o.rollout_mse(&seed64, h, w, n, &target64);
                fds.push((plus - minus) / (2.0 * hh));
            }
            let a = t.data[ci] as f64;
            let fd = fds[0];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            stats.push((rel, names[ti], ci, a, fds[0], fds[1], fds[2]));
        }
    }
    stats.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    println!("worst 12 (f64 oracle fd):");
    for (rel, name, ci, a, f1, f2, f3) in stats.iter().take(12) {
        println!("  rel {rel:9.2e}  {name}[{ci}]  ad {a:12.4e}  fd(1e-3) {f1:12.4e} fd(3e-3) {f2:12.4e} fd(1e-2) {f3:12.4e}");
    }
    let fail = stats.iter().filter(|s| s.0 >= 1e-2).count();
    println!("fail fraction: {}/{}", fail, stats.len());
    let grads_mag: Vec<f64> = ad.iter().flat_map(|t| t.data.iter().map(|&v| (v as f64).abs())).collect();
    let mx = grads_mag.iter().cloned().fold(0.0, f64::max);
    println!("max |grad| = {mx:.3e}");
}
