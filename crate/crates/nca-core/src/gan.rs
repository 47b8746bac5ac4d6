//! Adversarial training: the rollout becomes the generator of a GAN
//! conditioned on edge images.
//!
//! The discriminator is a small strided conv net scoring RGBA images
//! composited over white. Two loss variants are provided: smoothed
//! binary cross-entropy (labels 0.9/0.1) and a Wasserstein critic with
//! weight clipping. Gaussian instance noise goes into every
//! discriminator input, real and fake, which together with smoothing
//! keeps both losses in a healthy band instead of collapsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{nca_rollout_traced, sample_iterations, NcaParams, WorldState};
use crate::rng;
use crate::tensor::optim::{grad_normalize, AdamHyper, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::{load_examples, nca_params_from_checkpoint};

/// Discriminator stage widths after the 4-channel input.
const STAGE_WIDTHS: [usize; 4] = [32, 64, 128, 128];
const LEAKY_ALPHA: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossKind {
    BceSmoothed,
    Wgan,
}

#[derive(Clone, Debug)]
pub struct GanConfig {
    pub loss_kind: GanLossKind,
    pub noise_sigma: f32,
    /// Sigma anneals linearly from `noise_sigma` to this value.
    pub noise_sigma_final: f32,
    pub label_real: f32,
    pub label_fake: f32,
    pub n_critic: u32,
    pub clip_c: f32,
    pub iter_lo: u32,
    pub iter_hi: u32,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub depth: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            loss_kind: GanLossKind::BceSmoothed,
            noise_sigma: 0.1,
            noise_sigma_final: 0.02,
            label_real: 0.9,
            label_fake: 0.1,
            n_critic: 5,
            clip_c: 0.01,
            iter_lo: 50,
            iter_hi: 60,
            steps: 10_000,
            batch_size: 16,
            lr_g: 2e-4,
            lr_d: 2e-4,
            depth: 16,
            hidden: 128,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.noise_sigma < 0.0 || self.noise_sigma_final < 0.0 {
            bad.push("noise_sigma must be non-negative".to_string());
        }
        if !(0.0 <= self.label_fake && self.label_fake < self.label_real && self.label_real <= 1.0)
        {
            bad.push(format!(
                "labels need 0 <= fake < real <= 1, got {} / {}",
                self.label_fake, self.label_real
            ));
        }
        if self.iter_lo < 1 || self.iter_lo > self.iter_hi {
            bad.push(format!(
                "iteration range [{}, {}] is invalid",
                self.iter_lo, self.iter_hi
            ));
        }
        if self.steps < 1 {
            bad.push("steps must be at least 1".to_string());
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if self.n_critic < 1 {
            bad.push("n_critic must be at least 1".to_string());
        }
        if self.clip_c <= 0.0 {
            bad.push("clip_c must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad.join("; ")))
        }
    }

    pub fn sigma_at(&self, step: u64) -> f32 {
        if self.steps <= 1 {
            return self.noise_sigma;
        }
        let t = step as f32 / (self.steps - 1) as f32;
        self.noise_sigma + (self.noise_sigma_final - self.noise_sigma) * t
    }
}

/// Discriminator weights: four strided 3x3 stages and a linear head.
#[derive(Clone, Debug)]
pub struct DiscParams {
    pub stages: Vec<(Tensor, Tensor)>,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

pub struct TracedDisc {
    stages: Vec<(NodeId, NodeId)>,
    w_head: NodeId,
    b_head: NodeId,
}

/// Spatial side after the four stride-2 stages.
fn head_side(side: usize) -> usize {
    let mut s = side;
    for _ in 0..4 {
        s = (s - 1) / 2 + 1;
    }
    s
}

impl DiscParams {
    /// Flattened feature count for a given input size.
    pub fn flat_features(h: usize, w: usize) -> usize {
        head_side(h) * head_side(w) * STAGE_WIDTHS[3]
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        let mut stages = Vec::new();
        let mut cin = 4;
        for cout in STAGE_WIDTHS {
            stages.push((
                Tensor::zeros(vec![3, 3, cin, cout]),
                Tensor::zeros(vec![cout]),
            ));
            cin = cout;
        }
        DiscParams {
            stages,
            w_head: Tensor::zeros(vec![Self::flat_features(h, w), 1]),
            b_head: Tensor::zeros(vec![1]),
        }
    }

    /// Normal(0, 0.02) weights, zero biases.
    pub fn init(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, 0.02).expect("finite std");
        let mut p = DiscParams::zeros(h, w);
        for (w, _) in &mut p.stages {
            for v in &mut w.data {
                *v = normal.sample(rng);
            }
        }
        for v in &mut p.w_head.data {
            *v = normal.sample(rng);
        }
        p
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(10);
        for (w, b) in &self.stages {
            out.push(w);
            out.push(b);
        }
        out.push(&self.w_head);
        out.push(&self.b_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(10);
        for (w, b) in &mut self.stages {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TracedDisc {
        let mut reg = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        TracedDisc {
            stages: self
                .stages
                .iter()
                .map(|(w, b)| (reg(w), reg(b)))
                .collect(),
            w_head: reg(&self.w_head),
            b_head: reg(&self.b_head),
        }
    }

    /// Clamps every weight and bias into [-c, c].
    pub fn clip(&mut self, c: f32) {
        for t in self.tensors_mut() {
            for v in &mut t.data {
                *v = v.clamp(-c, c);
            }
        }
    }

    /// Simple sum over all parameters, used to assert update isolation.
    pub fn checksum(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| v as f64)
            .sum()
    }
}

/// Scores one `[h, w, 4]` image; returns the raw scalar logit node.
pub fn discriminator_forward(
    tape: &mut Tape,
    image: NodeId,
    disc: &TracedDisc,
) -> Result<NodeId> {
    let (h, w, c) = tape.value(image).hwc()?;
    if c != 4 {
        return Err(Error::config(format!(
            "discriminator input must have 4 channels, got {c}"
        )));
    }
    let expected = DiscParams::flat_features(h, w);
    let head_in = tape.value(disc.w_head).shape[0];
    if expected != head_in {
        return Err(Error::config(format!(
            "discriminator head expects {head_in} features, {h}x{w} input yields {expected}"
        )));
    }
    let mut x = image;
    for (w, b) in &disc.stages {
        let conv = tape.conv3x3_strided(x, *w, *b, 2)?;
        x = tape.leaky_relu(conv, LEAKY_ALPHA);
    }
    let flat = tape.flatten(x)?;
    tape.conv1x1(flat, disc.w_head, disc.b_head)
}

/// Adds i.i.d. Gaussian noise; no clamping, gradients pass untouched.
pub fn add_instance_noise(image: &Tensor, rng: &mut impl Rng, sigma: f32) -> Tensor {
    if sigma == 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let mut out = image.clone();
    for v in &mut out.data {
        *v += normal.sample(rng);
    }
    out
}

/// RGB composited over white with alpha passed through, off-tape.
pub fn composite_over_white_plain(rgba: &Tensor) -> Result<Tensor> {
    let (h, w, c) = rgba.hwc()?;
    if c != 4 {
        return Err(Error::config(format!("expected 4 channels, got {c}")));
    }
    let mut out = Tensor::zeros(vec![h, w, 4]);
    for p in 0..h * w {
        let a = rgba.data[p * 4 + 3];
        for k in 0..3 {
            out.data[p * 4 + k] = a * rgba.data[p * 4 + k] + (1.0 - a);
        }
        out.data[p * 4 + 3] = a;
    }
    Ok(out)
}

/// -[t ln p + (1-t) ln(1-p)] with probabilities clamped before logs.
pub fn bce_value(p: f32, t: f32) -> f32 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Discriminator and generator losses for the smoothed BCE variant.
pub fn gan_losses_bce(d_real: f32, d_fake: f32, label_real: f32, label_fake: f32) -> (f32, f32) {
    let loss_d = bce_value(d_real, label_real) + bce_value(d_fake, label_fake);
    let loss_g = -d_fake.clamp(1e-7, 1.0 - 1e-7).ln();
    (loss_d, loss_g)
}

/// Critic and generator losses for the Wasserstein variant.
pub fn gan_losses_wgan(c_real: f32, c_fake: f32) -> (f32, f32) {
    (c_fake - c_real, -c_fake)
}

/// Records -[t ln p + (1-t) ln(1-p)] for a scalar probability node.
fn bce_node(tape: &mut Tape, prob: NodeId, t: f32) -> Result<NodeId> {
    let log_p = tape.log_clamped(prob);
    let one_m = tape.one_minus(prob);
    let log_1m = tape.log_clamped(one_m);
    let a = tape.scale(log_p, t);
    let b = tape.scale(log_1m, 1.0 - t);
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, -1.0))
}

/// One discriminator/critic update on fixed real and fake images.
/// Returns the loss value.
pub(crate) fn discriminator_update(
    reals: &[Tensor],
    fakes: &[Tensor],
    disc: &mut DiscParams,
    opt_d: &mut AdamState,
    config: &GanConfig,
    noise_rng: &mut impl Rng,
    sigma: f32,
) -> Result<f32> {
    let mut tape = Tape::new();
    let traced = disc.register(&mut tape, true);
    let mut losses = Vec::with_capacity(reals.len() * 2);
    for (real, fake) in reals.iter().zip(fakes) {
        let real_in = tape.constant(add_instance_noise(real, noise_rng, sigma));
        let fake_in = tape.constant(add_instance_noise(fake, noise_rng, sigma));
        let logit_r = discriminator_forward(&mut tape, real_in, &traced)?;
        let logit_f = discriminator_forward(&mut tape, fake_in, &traced)?;
        match config.loss_kind {
            GanLossKind::BceSmoothed => {
                let p_r = tape.sigmoid(logit_r);
                let p_f = tape.sigmoid(logit_f);
                losses.push(bce_node(&mut tape, p_r, config.label_real)?);
                losses.push(bce_node(&mut tape, p_f, config.label_fake)?);
            }
            GanLossKind::Wgan => {
                // c_fake - c_real, kept per-term so the mean matches.
                losses.push(tape.scale(logit_f, 1.0));
                losses.push(tape.scale(logit_r, -1.0));
            }
        }
    }
    // Each sample contributed two terms; doubling the mean over all
    // terms gives the batch mean of per-sample (real + fake) losses.
    let mean = tape.mean_scalars(losses)?;
    let loss = tape.scale(mean, 2.0);
    let loss_val = tape.value(loss).data[0];
    let mut grads = tape.backward(loss)?;
    let ids: Vec<NodeId> = {
        let mut v = Vec::with_capacity(10);
        for (w, b) in &traced.stages {
            v.push(*w);
            v.push(*b);
        }
        v.push(traced.w_head);
        v.push(traced.b_head);
        v
    };
    let g: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.take(id).expect("trainable leaves have gradients"))
        .collect();
    let grefs: Vec<&Tensor> = g.iter().collect();
    opt_d.step(&mut disc.tensors_mut(), &grefs)?;
    if config.loss_kind == GanLossKind::Wgan {
        disc.clip(config.clip_c);
    }
    Ok(loss_val)
}

/// One generator update through the full rollout and the frozen
/// discriminator. Returns the loss value.
#[allow(clippy::too_many_arguments)]
pub(crate) fn generator_update(
    batch: &[(WorldState, Tensor)],
    gen: &mut NcaParams,
    disc: &DiscParams,
    opt_g: &mut AdamState,
    config: &GanConfig,
    n: u32,
    noises: Vec<Tensor>,
) -> Result<f32> {
    let per_sample: Vec<Result<(f32, Vec<Tensor>)>> = batch
        .par_iter()
        .zip(noises)
        .map(|((seed, _), noise)| {
            let mut tape = Tape::new();
            let traced_gen = gen.register(&mut tape, true);
            let traced_disc = disc.register(&mut tape, false);
            let seed_node = tape.constant(seed.grid().clone());
            let states = nca_rollout_traced(&mut tape, seed_node, &traced_gen, n)?;
            let last = *states.last().expect("rollout returns states");
            let rgba = tape.slice_rgba(last)?;
            let composited = tape.composite_over_white(rgba)?;
            let noise_node = tape.constant(noise);
            let disc_in = tape.add(composited, noise_node)?;
            let logit = discriminator_forward(&mut tape, disc_in, &traced_disc)?;
            let loss = match config.loss_kind {
                GanLossKind::BceSmoothed => {
                    let p = tape.sigmoid(logit);
                    let log_p = tape.log_clamped(p);
                    tape.scale(log_p, -1.0)
                }
                GanLossKind::Wgan => tape.scale(logit, -1.0),
            };
            let loss_val = tape.value(loss).data[0];
            let mut grads = tape.backward(loss)?;
            let g = [
                traced_gen.w_perc,
                traced_gen.b_perc,
                traced_gen.w_out,
                traced_gen.b_out,
            ]
            .iter()
            .map(|&id| grads.take(id).expect("trainable leaves have gradients"))
            .collect();
            Ok((loss_val, g))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in per_sample {
        let (l, g) = r?;
        loss_sum += l;
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
    let mut grads = acc.expect("batch is non-empty");
    let scale = 1.0 / batch.len() as f32;
    for g in &mut grads {
        for v in &mut g.data {
            *v *= scale;
        }
    }
    grad_normalize(&mut grads);
    let grefs: Vec<&Tensor> = grads.iter().collect();
    opt_g.step(&mut gen.tensors_mut(), &grefs)?;
    Ok(loss_sum * scale)
}

/// One adversarial step on a batch of (edge seed, composited real)
/// pairs: fakes from fresh seeds, discriminator update(s), generator
/// update through the rollout. No sample pool is used.
#[allow(clippy::too_many_arguments)]
pub fn ganca_train_step(
    batch: &[(WorldState, Tensor)],
    gen: &mut NcaParams,
    disc: &mut DiscParams,
    opt_g: &mut AdamState,
    opt_d: &mut AdamState,
    config: &GanConfig,
    step: u64,
) -> Result<(f32, f32)> {
    if batch.is_empty() {
        return Err(Error::usage("training batch is empty"));
    }
    let n = sample_iterations(
        &mut rng::step_stream(config.seed, "iters", step),
        config.iter_lo,
        config.iter_hi,
    )?;
    let sigma = config.sigma_at(step);
    let mut noise_rng = rng::step_stream(config.seed, "noise", step);

    // Fakes for the discriminator are plain values, not traced.
    let fakes: Vec<Result<Tensor>> = batch
        .par_iter()
        .map(|(seed, _)| {
            let trace = crate::model::nca_rollout(seed, gen, n, false)?;
            composite_over_white_plain(&crate::model::extract_rgba_raw(trace.final_state()))
        })
        .collect();
    let fakes: Vec<Tensor> = fakes.into_iter().collect::<Result<_>>()?;
    let reals: Vec<Tensor> = batch.iter().map(|(_, r)| r.clone()).collect();

    let critic_rounds = match config.loss_kind {
        GanLossKind::BceSmoothed => 1,
        GanLossKind::Wgan => config.n_critic,
    };
    let mut loss_d = 0.0;
    for _ in 0..critic_rounds {
        loss_d = discriminator_update(
            &reals, &fakes, disc, opt_d, config, &mut noise_rng, sigma,
        )?;
    }

    let disc_checksum = disc.checksum();
    let noises: Vec<Tensor> = batch
        .iter()
        .map(|(_, r)| {
            let mut noise = Tensor::zeros(r.shape.clone());
            if sigma > 0.0 {
                let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
                for v in &mut noise.data {
                    *v = normal.sample(&mut noise_rng);
                }
            }
            noise
        })
        .collect();
    let loss_g = generator_update(batch, gen, disc, opt_g, config, n, noises)?;
    debug_assert_eq!(
        disc.checksum(),
        disc_checksum,
        "generator update must not touch the discriminator"
    );

    if !loss_g.is_finite() || !loss_d.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            iterations: n,
            loss: if loss_g.is_finite() { loss_d } else { loss_g },
        });
    }
    Ok((loss_g, loss_d))
}

pub struct GanReport {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_loss_g: f32,
    pub last_loss_d: f32,
}

const DISC_NAMES: [&str; 10] = [
    "disc0_w", "disc0_b", "disc1_w", "disc1_b", "disc2_w", "disc2_b", "disc3_w", "disc3_b",
    "disc_head_w", "disc_head_b",
];

/// GANCA checkpoints hold the generator under the same names as the
/// supervised kind, then the discriminator, then all Adam moments; the
/// discriminator step count rides along as a one-element tensor.
pub fn pack_ganca(
    gen: &NcaParams,
    opt_g: &AdamState,
    disc: &DiscParams,
    opt_d: &AdamState,
) -> Checkpoint {
    let mut c = Checkpoint::new(
        CheckpointKind::Ganca,
        gen.depth(),
        gen.hidden(),
        opt_g.step_count,
    );
    let gen_names = ["w_perc", "b_perc", "w_out", "b_out"];
    for (name, t) in gen_names.iter().zip(gen.tensors()) {
        c.push(*name, t.clone());
    }
    for (name, t) in DISC_NAMES.iter().zip(disc.tensors()) {
        c.push(*name, t.clone());
    }
    for (prefix, opt, names, shapes) in [
        ("m", opt_g, &gen_names[..], gen.tensors().to_vec()),
        ("v", opt_g, &gen_names[..], gen.tensors().to_vec()),
        ("m", opt_d, &DISC_NAMES[..], disc.tensors()),
        ("v", opt_d, &DISC_NAMES[..], disc.tensors()),
    ] {
        let buf = if prefix == "m" { &opt.m } else { &opt.v };
        for ((name, t), data) in names.iter().zip(&shapes).zip(buf) {
            c.push(
                format!("{prefix}_{name}"),
                Tensor::new(t.shape.clone(), data.clone()).expect("moments mirror params"),
            );
        }
    }
    c.push(
        "disc_adam_step",
        Tensor::scalar(opt_d.step_count as f32),
    );
    c
}

pub fn disc_from_checkpoint(ckpt: &Checkpoint) -> Result<DiscParams> {
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        stages.push((
            ckpt.get(&format!("disc{i}_w"))?.clone(),
            ckpt.get(&format!("disc{i}_b"))?.clone(),
        ));
    }
    Ok(DiscParams {
        stages,
        w_head: ckpt.get("disc_head_w")?.clone(),
        b_head: ckpt.get("disc_head_b")?.clone(),
    })
}

fn adam_from_names(
    ckpt: &Checkpoint,
    names: &[&str],
    step_count: u64,
    hyper: AdamHyper,
) -> Result<AdamState> {
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in names {
        m.push(ckpt.get(&format!("m_{name}"))?.data.clone());
        v.push(ckpt.get(&format!("v_{name}"))?.data.clone());
    }
    Ok(AdamState {
        m,
        v,
        step_count,
        hyper,
    })
}

/// Runs the adversarial loop; losses land in `metrics.csv` as
/// `step,loss_g,loss_d` rows, checkpoints every 1000 steps and at the
/// end. Deterministic for a fixed config.
pub fn train_ganca(
    config: &GanConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<GanReport> {
    config.validate()?;
    let examples = load_examples(manifest, Split::Train, config.depth)?;
    if examples.is_empty() {
        return Err(Error::config("manifest has no train entries"));
    }
    let (h, w) = (manifest.size[0], manifest.size[1]);

    // Reals are composited once up front.
    let pairs: Vec<(WorldState, Tensor)> = examples
        .iter()
        .map(|ex| {
            let real = composite_over_white_plain(&ex.target)?;
            Ok((ex.seed.clone(), real))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "step,loss_g,loss_d").map_err(|e| Error::io(&metrics_path, e))?;

    let hyper_g = AdamHyper {
        lr: config.lr_g,
        beta1: 0.5,
        ..AdamHyper::default()
    };
    let hyper_d = AdamHyper {
        lr: config.lr_d,
        beta1: 0.5,
        ..AdamHyper::default()
    };
    let (mut gen, mut disc, mut opt_g, mut opt_d, start_step) = match resume {
        Some(ckpt) => {
            let gen = nca_params_from_checkpoint(ckpt)?;
            let disc = disc_from_checkpoint(ckpt)?;
            let gen_names = ["w_perc", "b_perc", "w_out", "b_out"];
            let opt_g = adam_from_names(ckpt, &gen_names, ckpt.adam_step, hyper_g)?;
            let disc_step = ckpt.get("disc_adam_step")?.data[0] as u64;
            let opt_d = adam_from_names(ckpt, &DISC_NAMES, disc_step, hyper_d)?;
            (gen, disc, opt_g, opt_d, ckpt.adam_step)
        }
        None => {
            let gen = NcaParams::init(
                config.depth,
                config.hidden,
                &mut rng::stream(config.seed, "init"),
            );
            let disc = DiscParams::init(h, w, &mut rng::stream(config.seed, "disc-init"));
            let opt_g = AdamState::new(&gen.tensors(), hyper_g);
            let opt_d = AdamState::new(&disc.tensors(), hyper_d);
            (gen, disc, opt_g, opt_d, 0)
        }
    };

    let mut last = (f32::NAN, f32::NAN);
    for step in start_step..config.steps {
        let mut data_rng = rng::step_stream(config.seed, "data", step);
        let batch: Vec<(WorldState, Tensor)> = (0..config.batch_size)
            .map(|_| pairs[data_rng.gen_range(0..pairs.len())].clone())
            .collect();
        let (loss_g, loss_d) = ganca_train_step(
            &batch, &mut gen, &mut disc, &mut opt_g, &mut opt_d, config, step,
        )?;
        last = (loss_g, loss_d);
        writeln!(metrics, "{},{loss_g},{loss_d}", step + 1)
            .map_err(|e| Error::io(&metrics_path, e))?;
        if (step + 1) % 1000 == 0 && step + 1 < config.steps {
            let path = out_dir.join(format!("checkpoint_{:07}.ckpt", step + 1));
            pack_ganca(&gen, &opt_g, &disc, &opt_d).save(&path)?;
        }
    }

    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_path = out_dir.join("checkpoint_final.ckpt");
    pack_ganca(&gen, &opt_g, &disc, &opt_d).save(&final_path)?;
    Ok(GanReport {
        final_checkpoint: final_path,
        metrics_path,
        last_loss_g: last.0,
        last_loss_d: last.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_seed, extract_rgba_raw};
    use crate::rng::stream;

    #[test]
    fn closed_form_bce_at_the_smoothed_optimum() {
        // H(0.9) twice: the discriminator sitting exactly on its
        // smoothed targets.
        let (loss_d, _) = gan_losses_bce(0.9, 0.1, 0.9, 0.1);
        assert!((loss_d - 0.650166).abs() < 1e-4, "{loss_d}");
    }

    #[test]
    fn generator_loss_at_half_is_ln_two() {
        let (_, loss_g) = gan_losses_bce(0.5, 0.5, 0.9, 0.1);
        assert!((loss_g - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn wgan_losses_are_differences() {
        let (c, g) = gan_losses_wgan(1.25, 1.25);
        assert_eq!(c, 0.0);
        assert_eq!(g, -1.25);
    }

    #[test]
    fn clipping_bounds_every_weight() {
        let mut disc = DiscParams::init(16, 16, &mut stream(3, "d"));
        for t in disc.tensors_mut() {
            t.data[0] = 5.0;
        }
        disc.clip(0.01);
        for t in disc.tensors() {
            assert!(t.data.iter().all(|v| v.abs() <= 0.01));
        }
    }

    #[test]
    fn zero_disc_outputs_one_half_probability() {
        let disc = DiscParams::zeros(16, 16);
        let mut tape = Tape::new();
        let traced = disc.register(&mut tape, false);
        let img = tape.constant(Tensor::zeros(vec![16, 16, 4]));
        let logit = discriminator_forward(&mut tape, img, &traced).unwrap();
        let p = tape.sigmoid(logit);
        assert_eq!(tape.value(p).data[0], 0.5);
    }

    #[test]
    fn disc_rejects_wrong_input_size() {
        let disc = DiscParams::init(32, 32, &mut stream(4, "d"));
        let mut tape = Tape::new();
        let traced = disc.register(&mut tape, false);
        let img = tape.constant(Tensor::zeros(vec![16, 16, 4]));
        assert!(discriminator_forward(&mut tape, img, &traced).is_err());
    }

    #[test]
    fn instance_noise_sigma_zero_is_identity() {
        let img = Tensor::new(vec![2, 2, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let out = add_instance_noise(&img, &mut stream(1, "n"), 0.0);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn instance_noise_statistics() {
        let n = 1_000_000;
        let img = Tensor::zeros(vec![1000, 1000, 1]);
        let out = add_instance_noise(&img, &mut stream(2, "n"), 0.1);
        let mean: f64 = out.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 = out.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn first_bce_loss_with_zero_disc_is_two_ln_two() {
        // Zero discriminator and no noise: both probabilities are 0.5,
        // so loss_d = 2 ln 2 regardless of the images.
        let config = GanConfig {
            noise_sigma: 0.0,
            noise_sigma_final: 0.0,
            batch_size: 2,
            depth: 8,
            hidden: 8,
            iter_lo: 2,
            iter_hi: 2,
            ..Default::default()
        };
        let mut disc = DiscParams::zeros(16, 16);
        let mut opt_d = AdamState::new(&disc.tensors(), AdamHyper::default());
        let reals = vec![Tensor::zeros(vec![16, 16, 4]); 2];
        let fakes = vec![Tensor::zeros(vec![16, 16, 4]); 2];
        let loss = discriminator_update(
            &reals,
            &fakes,
            &mut disc,
            &mut opt_d,
            &config,
            &mut stream(1, "noise"),
            0.0,
        )
        .unwrap();
        assert!(
            (loss - 2.0 * std::f32::consts::LN_2).abs() < 1e-5,
            "{loss}"
        );
    }

    #[test]
    fn critic_separates_fixed_real_and_fake_sets() {
        // Trained alone, the critic should drive c_real - c_fake up.
        let config = GanConfig {
            loss_kind: GanLossKind::Wgan,
            noise_sigma: 0.0,
            noise_sigma_final: 0.0,
            clip_c: 0.05,
            depth: 8,
            hidden: 8,
            ..Default::default()
        };
        let mut rng = stream(7, "imgs");
        let mut mk = |bright: bool| {
            let mut t = Tensor::zeros(vec![16, 16, 4]);
            for v in &mut t.data {
                *v = if bright {
                    rng.gen_range(0.7..1.0)
                } else {
                    rng.gen_range(0.0..0.3)
                };
            }
            t
        };
        let reals = vec![mk(true), mk(true)];
        let fakes = vec![mk(false), mk(false)];
        let mut disc = DiscParams::init(16, 16, &mut stream(8, "d"));
        let mut opt_d = AdamState::new(
            &disc.tensors(),
            AdamHyper {
                lr: 5e-4,
                beta1: 0.5,
                ..AdamHyper::default()
            },
        );
        let mut first = None;
        let mut last = 0.0;
        for i in 0..200 {
            let loss = discriminator_update(
                &reals,
                &fakes,
                &mut disc,
                &mut opt_d,
                &config,
                &mut stream(i, "noise"),
                0.0,
            )
            .unwrap();
            if first.is_none() {
                first = Some(loss);
            }
            last = loss;
            for t in disc.tensors() {
                assert!(t.data.iter().all(|v| v.abs() <= config.clip_c + 1e-9));
            }
        }
        // loss_c = c_fake - c_real must drop below its starting value.
        assert!(last < first.unwrap(), "{first:?} -> {last}");
        assert!(last < 0.0, "critic never separated the sets: {last}");
    }

    #[test]
    fn train_step_updates_both_and_keeps_them_isolated() {
        let config = GanConfig {
            batch_size: 2,
            depth: 8,
            hidden: 8,
            iter_lo: 2,
            iter_hi: 3,
            steps: 10,
            ..Default::default()
        };
        let mut edge = Tensor::zeros(vec![16, 16, 1]);
        for x in 4..12 {
            edge.data[5 * 16 + x] = 1.0;
        }
        let seed = build_seed(&edge, 8).unwrap();
        let real = composite_over_white_plain(&extract_rgba_raw(&seed)).unwrap();
        let batch = vec![(seed.clone(), real.clone()), (seed, real)];
        let mut gen = NcaParams::init(8, 8, &mut stream(1, "g"));
        let mut disc = DiscParams::init(16, 16, &mut stream(2, "d"));
        let mut opt_g = AdamState::new(&gen.tensors(), AdamHyper::default());
        let mut opt_d = AdamState::new(&disc.tensors(), AdamHyper::default());
        let gen_before = gen.w_out.data.clone();
        let disc_before = disc.checksum();
        let (loss_g, loss_d) = ganca_train_step(
            &batch, &mut gen, &mut disc, &mut opt_g, &mut opt_d, &config, 0,
        )
        .unwrap();
        assert!(loss_g.is_finite() && loss_d.is_finite());
        assert_ne!(gen.w_out.data, gen_before, "generator did not move");
        assert_ne!(disc.checksum(), disc_before, "discriminator did not move");
        assert_eq!(opt_g.step_count, 1);
        assert_eq!(opt_d.step_count, 1);
    }

    #[test]
    fn ganca_checkpoint_round_trips() {
        let gen = NcaParams::init(8, 8, &mut stream(5, "g"));
        let disc = DiscParams::init(16, 16, &mut stream(6, "d"));
        let mut opt_g = AdamState::new(&gen.tensors(), AdamHyper::default());
        let opt_d = AdamState::new(&disc.tensors(), AdamHyper::default());
        opt_g.step_count = 9;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        pack_ganca(&gen, &opt_g, &disc, &opt_d).save(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.kind, CheckpointKind::Ganca);
        assert_eq!(ckpt.adam_step, 9);
        let gen2 = nca_params_from_checkpoint(&ckpt).unwrap();
        assert_eq!(gen2.w_perc.data, gen.w_perc.data);
        let disc2 = disc_from_checkpoint(&ckpt).unwrap();
        assert_eq!(disc2.w_head.data, disc.w_head.data);
        assert_eq!(ckpt.get("disc_adam_step").unwrap().data[0], 0.0);
    }
}
