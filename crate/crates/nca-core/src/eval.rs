//! Evaluation reports, persistence checks and image export.
//!
//! Scoring composites both the model output and the ground truth over
//! white, so supervised and adversarially trained models are measured
//! in the same space.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_edge_png, manifest::load_gt, save_png, DatasetManifest, EdgeImage, RgbaImage, Split};
use crate::error::{Error, Result};
use crate::gan::composite_over_white_plain;
use crate::model::{build_seed, extract_rgba, nca_rollout, NcaParams};
use crate::tensor::{mse, Tensor};

/// Mean squared error between two RGBA tensors after compositing both
/// over white.
pub fn composited_mse(output: &Tensor, target: &Tensor) -> Result<f32> {
    let a = composite_over_white_plain(output)?;
    let b = composite_over_white_plain(target)?;
    mse(&a, &b)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub split: Split,
    /// Absent for entries without ground truth.
    pub mse: Option<f32>,
    pub n_iters: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitAggregate {
    pub split: Split,
    pub count: usize,
    pub mean: f32,
    pub min: f32,
    pub max: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub manifest: String,
    pub n_iters: u32,
    pub entries: Vec<EvalEntry>,
    pub aggregates: Vec<SplitAggregate>,
}

impl EvalReport {
    pub fn aggregate_for(&self, split: Split) -> Option<&SplitAggregate> {
        self.aggregates.iter().find(|a| a.split == split)
    }
}

/// Rolls out every manifest entry from a fresh seed and scores it
/// against its ground truth where one exists.
pub fn eval_dataset(
    params: &NcaParams,
    manifest: &DatasetManifest,
    n_iters: u32,
    checkpoint_label: &str,
    manifest_label: &str,
) -> Result<EvalReport> {
    let jobs: Vec<(usize, Result<Option<f32>>)> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let run = || -> Result<Option<f32>> {
                let edge = load_edge_png(Path::new(&entry.edge))?;
                let seed = build_seed(&edge.to_tensor(), params.depth())?;
                let trace = nca_rollout(&seed, params, n_iters, false)?;
                let out = extract_rgba(trace.final_state());
                match load_gt(manifest, entry)? {
                    None => Ok(None),
                    Some(gt) => Ok(Some(composited_mse(&out, &gt.to_tensor())?)),
                }
            };
            (i, run())
        })
        .collect();

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (i, res) in jobs {
        let entry = &manifest.entries[i];
        entries.push(EvalEntry {
            id: entry.id.clone(),
            split: entry.split,
            mse: res?,
            n_iters,
        });
    }

    let mut aggregates = Vec::new();
    for split in [Split::Train, Split::Val, Split::Ood] {
        let values: Vec<f32> = entries
            .iter()
            .filter(|e| e.split == split)
            .filter_map(|e| e.mse)
            .collect();
        if values.is_empty() {
            continue;
        }
        aggregates.push(SplitAggregate {
            split,
            count: values.len(),
            mean: values.iter().sum::<f32>() / values.len() as f32,
            min: values.iter().cloned().fold(f32::INFINITY, f32::min),
            max: values.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        });
    }

    Ok(EvalReport {
        checkpoint: checkpoint_label.to_string(),
        manifest: manifest_label.to_string(),
        n_iters,
        entries,
        aggregates,
    })
}

/// Stability ratio: the score after `n + k` iterations over the score
/// after `n`, against the same ground truth. Exactly 1 for `k = 0`.
pub fn persistence_check(
    params: &NcaParams,
    edge: &EdgeImage,
    target: &RgbaImage,
    n: u32,
    k: u32,
) -> Result<f32> {
    if n < 1 {
        return Err(Error::usage("persistence check needs n >= 1"));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let seed = build_seed(&edge.to_tensor(), params.depth())?;
    let at_n = nca_rollout(&seed, params, n, false)?;
    let mse_n = composited_mse(
        &extract_rgba(at_n.final_state()),
        &target.to_tensor(),
    )?;
    let at_nk = nca_rollout(at_n.final_state(), params, k, false)?;
    let mse_nk = composited_mse(
        &extract_rgba(at_nk.final_state()),
        &target.to_tensor(),
    )?;
    Ok(mse_nk / mse_n.max(1e-8))
}

/// Writes `frame_0000.png` (the seed readout) through `frame_NNNN.png`.
pub fn export_frames(
    params: &NcaParams,
    edge: &EdgeImage,
    n: u32,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seed = build_seed(&edge.to_tensor(), params.depth())?;
    let states = if n == 0 {
        vec![seed]
    } else {
        nca_rollout(&seed, params, n, true)?.states
    };
    let mut paths = Vec::with_capacity(states.len());
    for (k, state) in states.iter().enumerate() {
        let img = RgbaImage::from_tensor(&extract_rgba(state))?;
        let path = out_dir.join(format!("frame_{k:04}.png"));
        save_png(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Fraction of edge pixels that the output covers with visible ink
/// (alpha above 0.1 at the same position).
pub fn ink_coverage(edge: &EdgeImage, output: &Tensor) -> Result<f32> {
    let (h, w, c) = output.hwc()?;
    if c != 4 || h != edge.height || w != edge.width {
        return Err(Error::config("coverage needs a matching [h, w, 4] output"));
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    for p in 0..h * w {
        if edge.pixels[p] > 0.5 {
            total += 1;
            if output.data[p * 4 + 3] > 0.1 {
                covered += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(covered as f32 / total as f32)
}

/// One comparison row: edge, GANCA output, NCA output, ground truth
/// when present.
struct SheetRow {
    tiles: Vec<RgbaImage>,
}

/// Renders per-split contact sheets, one row per entry with tiles in
/// the order edge | ganca | nca | gt. Returns (split name, path) pairs.
pub fn export_comparison(
    ganca: &NcaParams,
    nca: &NcaParams,
    manifest: &DatasetManifest,
    n_iters: u32,
    out_dir: &Path,
) -> Result<Vec<(String, PathBuf)>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (manifest.size[0], manifest.size[1]);
    let mut outputs = Vec::new();
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Val, "val"),
        (Split::Ood, "ood"),
    ] {
        let entries = manifest.split_entries(split);
        if entries.is_empty() {
            continue;
        }
        let mut rows = Vec::new();
        let mut any_gt = false;
        for entry in entries {
            let edge = load_edge_png(Path::new(&entry.edge))?;
            let mut edge_tile = RgbaImage::new(w, h);
            for (p, &v) in edge.pixels.iter().enumerate() {
                edge_tile.pixels[p * 4..p * 4 + 3].fill(v);
                edge_tile.pixels[p * 4 + 3] = 1.0;
            }
            let seed = build_seed(&edge.to_tensor(), ganca.depth())?;
            let g_out = extract_rgba(nca_rollout(&seed, ganca, n_iters, false)?.final_state());
            let seed_n = build_seed(&edge.to_tensor(), nca.depth())?;
            let n_out = extract_rgba(nca_rollout(&seed_n, nca, n_iters, false)?.final_state());
            let mut tiles = vec![
                edge_tile,
                RgbaImage::from_tensor(&g_out)?.composite_over_white(),
                RgbaImage::from_tensor(&n_out)?.composite_over_white(),
            ];
            if let Some(gt) = load_gt(manifest, entry)? {
                tiles.push(gt.composite_over_white());
                any_gt = true;
            }
            rows.push(SheetRow { tiles });
        }
        let cols = if any_gt { 4 } else { 3 };
        let mut sheet = RgbaImage::new(cols * w, rows.len() * h);
        // Background stays transparent where a row has no ground truth.
        for (r, row) in rows.iter().enumerate() {
            for (c, tile) in row.tiles.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let src = (y * w + x) * 4;
                        let dst = ((r * h + y) * cols * w + c * w + x) * 4;
                        sheet.pixels[dst..dst + 4]
                            .copy_from_slice(&tile.pixels[src..src + 4]);
                    }
                }
            }
        }
        let path = out_dir.join(format!("comparison_{name}.png"));
        save_png(&sheet, &path)?;
        outputs.push((name.to_string(), path));
    }
    Ok(outputs)
}
