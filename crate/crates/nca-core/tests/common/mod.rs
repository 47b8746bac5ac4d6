//! Shared test support: finite-difference oracles, an independent f64
//! forward path for the cell rule, and dataset builders.
#![allow(dead_code)]

use nca_core::data::{build_manifest, DatasetManifest, ManifestOptions};
use nca_core::faces::synth_face;
use nca_core::model::NcaParams;
use std::path::Path;

/// Independent f64 implementation of the cell rule's forward pass,
/// used as the ground truth for finite-difference checks. Shares no
/// code with the implementation under test.
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

/// Central finite difference of `f` along one coordinate.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Fraction of coordinates whose autodiff gradient matches the finite
/// difference within `rel_tol`, treating near-zero pairs as matches.
pub fn agreement_fraction(ad: &[f32], fd: &[f64], rel_tol: f64, floor: f64) -> (f64, f64) {
    assert_eq!(ad.len(), fd.len());
    let mut ok = 0usize;
    let mut worst = 0.0f64;
    for (&a, &b) in ad.iter().zip(fd) {
        let a = a as f64;
        let denom = a.abs().max(b.abs());
        let rel = if denom < floor {
            0.0
        } else {
            (a - b).abs() / denom
        };
        if rel < rel_tol {
            ok += 1;
        }
        worst = worst.max(rel);
    }
    (ok as f64 / ad.len() as f64, worst)
}

/// Writes `count` synthetic faces and builds a manifest over them.
pub fn face_manifest(
    dir: &Path,
    count: usize,
    resolution: usize,
    val_fraction: f32,
    seed: u64,
) -> DatasetManifest {
    for i in 0..count {
        let img = synth_face(resolution * 4, i, seed);
        nca_core::data::save_png(&img, &dir.join(format!("face_{i:02}.png"))).unwrap();
    }
    build_manifest(
        dir,
        &ManifestOptions {
            resolution,
            val_fraction,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}
