//! Supervised multi-target training.
//!
//! Every step draws a batch of training examples, rolls the rule out
//! for a shared random number of iterations, applies a pixel-wise L2
//! loss on the unclamped RGBA readout, and backpropagates through the
//! whole rollout. Persistence comes from a sample pool: with some
//! probability the rollout starts from a previous final state instead
//! of a fresh seed, so the rule also learns to keep finished images
//! stable.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{load_edge_png, manifest::load_gt, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{
    build_seed, nca_rollout, nca_rollout_traced, sample_iterations, NcaParams, WorldState,
};
use crate::rng;
use crate::tensor::optim::{grad_normalize, AdamHyper, AdamState};
use crate::tensor::tape::Tape;
use crate::tensor::{mse, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub iter_lo: u32,
    pub iter_hi: u32,
    pub lr: f32,
    pub reuse_prob: f32,
    pub pool_capacity: usize,
    pub depth: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 16,
            iter_lo: 50,
            iter_hi: 60,
            lr: 2e-3,
            reuse_prob: 0.5,
            pool_capacity: 8,
            depth: 16,
            hidden: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.steps < 1 {
            bad.push("steps must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if self.iter_lo < 1 || self.iter_lo > self.iter_hi {
            bad.push(format!(
                "iteration range [{}, {}] is invalid",
                self.iter_lo, self.iter_hi
            ));
        }
        if !(0.0..=1.0).contains(&self.reuse_prob) {
            bad.push(format!("reuse_prob {} outside [0, 1]", self.reuse_prob));
        }
        if self.depth < 5 {
            bad.push(format!("depth {} must be at least 5", self.depth));
        }
        if self.hidden < 1 {
            bad.push("hidden must be at least 1".to_string());
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    /// Learning rate for a step: base rate with a x0.1 decay over the
    /// last fifth of the run.
    pub fn lr_at(&self, step: u64) -> f32 {
        if step >= self.steps * 4 / 5 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Per-example ring buffers of previous rollout endpoints.
///
/// A pooled state is only ever paired with its own example, and rings
/// evict oldest-first at capacity.
pub struct SamplePool {
    slots: Vec<VecDeque<WorldState>>,
    capacity: usize,
}

impl SamplePool {
    pub fn new(examples: usize, capacity: usize) -> Self {
        SamplePool {
            slots: (0..examples).map(|_| VecDeque::new()).collect(),
            capacity,
        }
    }

    /// With probability `reuse_prob` (and a non-empty ring) returns a
    /// stored state, otherwise a copy of the fresh seed.
    pub fn sample(
        &self,
        example: usize,
        rng: &mut impl Rng,
        reuse_prob: f32,
        fresh: &WorldState,
    ) -> WorldState {
        let ring = &self.slots[example];
        let reuse = rng.gen::<f32>() < reuse_prob;
        if reuse && !ring.is_empty() {
            ring[rng.gen_range(0..ring.len())].clone()
        } else {
            fresh.clone()
        }
    }

    pub fn commit(&mut self, example: usize, state: WorldState) {
        let ring = &mut self.slots[example];
        ring.push_back(state);
        while ring.len() > self.capacity {
            ring.pop_front();
        }
    }

    pub fn stored(&self, example: usize) -> usize {
        self.slots[example].len()
    }
}

/// One training example prepared for rollouts.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub seed: WorldState,
    /// `[h, w, 4]` RGBA target in [0, 1].
    pub target: Tensor,
}

/// Loads (seed, target) pairs for a split. Entries without ground truth
/// are rejected for train/val use.
pub fn load_examples(
    manifest: &DatasetManifest,
    split: Split,
    depth: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        let edge = load_edge_png(Path::new(&entry.edge))?;
        if edge.height != manifest.size[0] || edge.width != manifest.size[1] {
            return Err(Error::config(format!(
                "edge image {} is {}x{}, manifest says {}x{}",
                entry.edge, edge.height, edge.width, manifest.size[0], manifest.size[1]
            )));
        }
        let gt = load_gt(manifest, entry)?.ok_or_else(|| {
            Error::config(format!("entry {} has no ground truth image", entry.id))
        })?;
        out.push(Example {
            id: entry.id.clone(),
            seed: build_seed(&edge.to_tensor(), depth)?,
            target: gt.to_tensor(),
        });
    }
    Ok(out)
}

/// Gradient of the mean per-sample loss for one batch, plus the loss
/// and final states. Rollouts run in parallel; the reduction is in
/// batch order, so results do not depend on thread count.
fn batch_grads(
    batch: &[(WorldState, &Tensor)],
    params: &NcaParams,
    n: u32,
) -> Result<(f32, Vec<Tensor>, Vec<WorldState>)> {
    let per_sample: Vec<Result<(f32, Vec<Tensor>, WorldState)>> = batch
        .par_iter()
        .map(|(state, target)| {
            let mut tape = Tape::new();
            let traced = params.register(&mut tape, true);
            let seed = tape.constant(state.grid().clone());
            let states = nca_rollout_traced(&mut tape, seed, &traced, n)?;
            let last = *states.last().expect("rollout returns states");
            let rgba = tape.slice_rgba(last)?;
            let target_node = tape.constant((*target).clone());
            let loss = tape.mse_loss(rgba, target_node)?;
            let loss_val = tape.value(loss).data[0];
            let final_grid = tape.value(last).clone();
            let mut grads = tape.backward(loss)?;
            let g = [traced.w_perc, traced.b_perc, traced.w_out, traced.b_out]
                .iter()
                .map(|&id| grads.take(id).expect("trainable leaves have gradients"))
                .collect();
            Ok((loss_val, g, WorldState::new(final_grid)?))
        })
        .collect();

    let mut loss_sum = 0.0f32;
    let mut acc: Option<Vec<Tensor>> = None;
    let mut finals = Vec::with_capacity(batch.len());
    for r in per_sample {
        let (l, g, f) = r?;
        loss_sum += l;
        finals.push(f);
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (at, gt) in a.iter_mut().zip(&g) {
                    for (x, y) in at.data.iter_mut().zip(&gt.data) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    let mut grads = acc.expect("batch is non-empty");
    for g in &mut grads {
        for v in &mut g.data {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, grads, finals))
}

/// One supervised step: rollout, loss, backprop, normalized Adam
/// update. Returns the batch loss and the final states for pooling.
pub fn train_step_supervised(
    batch: &[(WorldState, &Tensor)],
    params: &mut NcaParams,
    opt: &mut AdamState,
    n: u32,
) -> Result<(f32, Vec<WorldState>)> {
    if batch.is_empty() {
        return Err(Error::usage("training batch is empty"));
    }
    let (loss, mut grads, finals) = batch_grads(batch, params, n)?;
    grad_normalize(&mut grads);
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, &grad_refs)?;
    Ok((loss, finals))
}

/// Mean loss over examples from fresh seeds at a fixed iteration count.
pub fn validation_loss(examples: &[Example], params: &NcaParams, n: u32) -> Result<f32> {
    let losses: Vec<Result<f32>> = examples
        .par_iter()
        .map(|ex| {
            let trace = nca_rollout(&ex.seed, params, n, false)?;
            let rgba = crate::model::extract_rgba_raw(trace.final_state());
            mse(&rgba, &ex.target)
        })
        .collect();
    let mut sum = 0.0;
    for l in &losses {
        sum += *l.as_ref().map_err(|e| Error::config(e.to_string()))?;
    }
    Ok(sum / examples.len() as f32)
}

pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_train_loss: f32,
}

/// Checkpoint layout for the supervised trainer: parameters first, then
/// Adam moments in the same order.
pub fn pack_nca(params: &NcaParams, opt: &AdamState) -> Checkpoint {
    let mut c = Checkpoint::new(
        CheckpointKind::Nca,
        params.depth(),
        params.hidden(),
        opt.step_count,
    );
    let names = ["w_perc", "b_perc", "w_out", "b_out"];
    for (name, t) in names.iter().zip(params.tensors()) {
        c.push(*name, t.clone());
    }
    for (prefix, buf) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, (t, data)) in names.iter().zip(params.tensors().iter().zip(buf)) {
            c.push(
                format!("{prefix}_{name}"),
                Tensor::new(t.shape.clone(), data.clone()).expect("moment shapes mirror params"),
            );
        }
    }
    c
}

/// Reads parameters back from a checkpoint of either kind (a GANCA
/// checkpoint stores its generator under the same names).
pub fn nca_params_from_checkpoint(ckpt: &Checkpoint) -> Result<NcaParams> {
    Ok(NcaParams {
        w_perc: ckpt.get("w_perc")?.clone(),
        b_perc: ckpt.get("b_perc")?.clone(),
        w_out: ckpt.get("w_out")?.clone(),
        b_out: ckpt.get("b_out")?.clone(),
    })
}

/// Restores Adam moments saved by [`pack_nca`].
pub fn adam_from_checkpoint(
    ckpt: &Checkpoint,
    params: &NcaParams,
    hyper: AdamHyper,
) -> Result<AdamState> {
    let mut state = AdamState::new(&params.tensors(), hyper);
    state.step_count = ckpt.adam_step;
    let names = ["w_perc", "b_perc", "w_out", "b_out"];
    for (i, name) in names.iter().enumerate() {
        state.m[i] = ckpt.get(&format!("m_{name}"))?.data.clone();
        state.v[i] = ckpt.get(&format!("v_{name}"))?.data.clone();
    }
    Ok(state)
}

/// Runs the full supervised loop: per-step losses to `metrics.csv`,
/// validation every 100 steps, checkpoints every 1000 steps and at the
/// end. Deterministic for a fixed config.
pub fn train_supervised(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    config.validate()?;
    let train = load_examples(manifest, Split::Train, config.depth)?;
    if train.is_empty() {
        return Err(Error::config("manifest has no train entries"));
    }
    let val = load_examples(manifest, Split::Val, config.depth)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "step,split,loss").map_err(|e| Error::io(&metrics_path, e))?;

    let hyper = AdamHyper {
        lr: config.lr,
        ..AdamHyper::default()
    };
    let (mut params, mut opt, start_step) = match resume {
        Some(ckpt) => {
            let p = nca_params_from_checkpoint(ckpt)?;
            if p.depth() != config.depth || p.hidden() != config.hidden {
                return Err(Error::config(format!(
                    "checkpoint is d={} f={}, config wants d={} f={}",
                    p.depth(),
                    p.hidden(),
                    config.depth,
                    config.hidden
                )));
            }
            let opt = adam_from_checkpoint(ckpt, &p, hyper)?;
            let start = ckpt.adam_step;
            (p, opt, start)
        }
        None => {
            let p = NcaParams::init(
                config.depth,
                config.hidden,
                &mut rng::stream(config.seed, "init"),
            );
            let opt = AdamState::new(&p.tensors(), hyper);
            (p, opt, 0)
        }
    };

    let mut pool = SamplePool::new(train.len(), config.pool_capacity);
    let mut last_train_loss = f32::NAN;

    for step in start_step..config.steps {
        let n = sample_iterations(
            &mut rng::step_stream(config.seed, "iters", step),
            config.iter_lo,
            config.iter_hi,
        )?;
        let mut data_rng = rng::step_stream(config.seed, "data", step);
        let mut pool_rng = rng::step_stream(config.seed, "pool", step);

        let mut chosen = Vec::with_capacity(config.batch_size);
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let idx = data_rng.gen_range(0..train.len());
            let state = pool.sample(idx, &mut pool_rng, config.reuse_prob, &train[idx].seed);
            chosen.push(idx);
            batch.push((state, &train[idx].target));
        }

        opt.hyper.lr = config.lr_at(step);
        let (loss, finals) = train_step_supervised(&batch, &mut params, &mut opt, n)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                iterations: n,
                loss,
            });
        }
        for (idx, state) in chosen.into_iter().zip(finals) {
            pool.commit(idx, state);
        }
        last_train_loss = loss;
        writeln!(metrics, "{},train,{loss}", step + 1).map_err(|e| Error::io(&metrics_path, e))?;

        if !val.is_empty() && (step + 1) % 100 == 0 {
            let vloss = validation_loss(&val, &params, config.iter_hi)?;
            writeln!(metrics, "{},val,{vloss}", step + 1)
                .map_err(|e| Error::io(&metrics_path, e))?;
        }
        if (step + 1) % 1000 == 0 && step + 1 < config.steps {
            let path = out_dir.join(format!("checkpoint_{:07}.ckpt", step + 1));
            pack_nca(&params, &opt).save(&path)?;
        }
    }

    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_path = out_dir.join("checkpoint_final.ckpt");
    pack_nca(&params, &opt).save(&final_path)?;
    Ok(TrainReport {
        final_checkpoint: final_path,
        metrics_path,
        last_train_loss,
    })
}
