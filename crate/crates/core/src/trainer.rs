//! Adapter fitting: the reward-driven loop, the reconstruction baseline, and
//! the ablation grid.
//!
//! Each reward step samples noise and a prompt, denoises a target video with
//! the gated adapter (gradients flowing only through the gated tail of the
//! chain), denoises a gradient-free source video from the same noise with
//! the adapter off, and descends the identity + semantic objective. Only
//! adapter matrices and optimizer moments ever change; the denoiser and both
//! reward models stay frozen.

use std::collections::BTreeSet;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::adapter::{init_adapter, AdapterBinding, AdapterParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalVideo, MetricsReport, RunSpec};
use crate::model::{decode, AttnKind, DenoiserState};
use crate::objectives::{
    icr_loss, reconstruction_loss, scr_distribution, scr_loss, total_loss, LossBreakdown,
};
use crate::optim::{AdamW, OptimConfig};
use crate::prompts::{sample_prompt, PromptPool, PromptSpec};
use crate::rewards::{augment_crop, crop_face, RewardModels};
use crate::rng;
use crate::sampler::sample_video;
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::world::{canonical_box, Rect};

/// Consecutive aborted steps tolerated before a run is declared failed.
pub const MAX_CONSECUTIVE_ABORTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Gated adapter fitted by backpropagating rewards through sampling.
    Reward,
    /// Ungated adapter fitted by denoising the references themselves.
    Reconstruction,
}

/// Every knob of one fit. Optimizer defaults follow the reference recipe
/// (lr 1e-4, betas 0.9/0.999, eps 1e-8, weight decay 1e-2, batch 1);
/// iteration count and sampler depth are scaled to desk size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// Denoising steps T for both target and source chains.
    pub sampler_steps: usize,
    pub schedule: ScheduleKind,
    pub cfg_scale: f64,
    /// Frames scored per semantic-alignment batch.
    pub m_frames: usize,
    /// Reference images per identity the scenario is expected to supply.
    pub k_references: usize,
    pub gate_fraction: f64,
    pub rank: usize,
    pub target_kinds: BTreeSet<AttnKind>,
    pub mode: TrainMode,
    pub icr_weight: f64,
    pub scr_weight: f64,
    /// Reference-crop jitter strength in [0,1]; 0 disables augmentation.
    pub augment_strength: f64,
    /// Stream seed for per-step noise, prompt, frame, and jitter draws.
    pub seed: u64,
    /// Seed for the adapter's down-projection initialization.
    pub adapter_seed: u64,
    /// Steps between persisted checkpoints when a runner wants them; 0 = off.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            optim: OptimConfig::default(),
            batch_size: 1,
            sampler_steps: 16,
            schedule: ScheduleKind::Cosine,
            cfg_scale: 7.5,
            m_frames: 8,
            k_references: 4,
            gate_fraction: crate::adapter::DEFAULT_GATE_FRACTION,
            rank: crate::adapter::DEFAULT_RANK,
            target_kinds: crate::adapter::default_target_kinds(),
            mode: TrainMode::Reward,
            icr_weight: 1.0,
            scr_weight: 1.0,
            augment_strength: 0.3,
            seed: 0,
            adapter_seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, frozen: &DenoiserState) -> Result<()> {
        self.optim.validate()?;
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.sampler_steps < 1 {
            return Err(Error::invalid("sampler needs at least 1 step"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if self.m_frames < 2 || self.m_frames > frozen.config.frames {
            return Err(Error::invalid(format!(
                "scored frame count must lie in [2, {}], got {}",
                frozen.config.frames, self.m_frames
            )));
        }
        if self.k_references < 1 {
            return Err(Error::invalid("at least one reference is required"));
        }
        for (name, w) in [("identity", self.icr_weight), ("semantic", self.scr_weight)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} weight must be finite and nonnegative, got {w}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.augment_strength) {
            return Err(Error::invalid(format!(
                "augment strength must lie in [0,1], got {}",
                self.augment_strength
            )));
        }
        Ok(())
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.sampler_steps, self.schedule)
    }
}

/// Mutable half of a fit: adapter values, optimizer moments, counters, and
/// the loss history. Everything else a step reads is immutable.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adapter: AdapterParams,
    pub optimizer: AdamW,
    pub step: usize,
    pub history: Vec<LossBreakdown>,
    pub consecutive_aborts: usize,
}

impl TrainState {
    /// Fresh state: adapter with zero up-projections (so the first target
    /// video matches the source exactly) and empty optimizer moments.
    pub fn init(frozen: &DenoiserState, config: &TrainConfig) -> Result<TrainState> {
        config.validate(frozen)?;
        let gate = match config.mode {
            TrainMode::Reward => config.gate_fraction,
            // Reconstruction tuning applies the adapter at every step.
            TrainMode::Reconstruction => 1.0,
        };
        let adapter = init_adapter(
            frozen,
            config.rank,
            gate,
            config.target_kinds.clone(),
            config.adapter_seed,
        )?;
        Ok(TrainState {
            adapter,
            optimizer: AdamW::new(config.optim.clone())?,
            step: 0,
            history: Vec::new(),
            consecutive_aborts: 0,
        })
    }
}

fn noise_shape(frozen: &DenoiserState) -> Vec<usize> {
    let c = &frozen.config;
    vec![1, c.frames, c.latent_h, c.latent_w, c.latent_c]
}

/// Unit-norm embeddings of freshly augmented reference crops.
fn augmented_reference_embeddings(
    refs: &[(RawTensor, Rect)],
    rewards: &RewardModels,
    strength: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<RawTensor>> {
    if refs.is_empty() {
        return Err(Error::invalid("at least one reference image is required"));
    }
    refs.iter()
        .map(|(img, b)| {
            let crop = crop_face(&Tensor::leaf(img.clone()), b)?;
            let jittered = augment_crop(&crop, strength, rng.random())?;
            Ok(rewards.reward_embedder.embed(&jittered).value().clone())
        })
        .collect()
}

/// Gradients for every adapter factor, keyed like the adapter's parameter
/// map. Factors the graph never reached fall back to zeros.
fn adapter_gradients(
    binding: &AdapterBinding,
    grads: &tinyvid_autodiff::Gradients,
) -> Result<std::collections::BTreeMap<String, RawTensor>> {
    let mut out = std::collections::BTreeMap::new();
    for (key, (down, up)) in &binding.tensors {
        for (suffix, var) in [("down", down), ("up", up)] {
            let g = grads.get_or_zeros(var);
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient for {key}.{suffix}")));
            }
            out.insert(format!("{key}.{suffix}"), g);
        }
    }
    Ok(out)
}

/// One reward-supervised update. Draws noise and a prompt, renders target
/// (gated adapter, gradients through the gated tail) and source (no adapter,
/// no gradients) videos from the same noise, scores the identity term on one
/// uniformly chosen frame and the semantic term on `m_frames` shared frame
/// indices, and applies a single optimizer update to the adapter.
///
/// On a non-finite loss or gradient the update is skipped, the error is
/// returned, and the state is left exactly as it was except for the step
/// counter (which advances so the next attempt draws fresh noise).
pub fn train_step(
    state: &mut TrainState,
    refs: &[(RawTensor, Rect)],
    pool: &PromptPool,
    frozen: &DenoiserState,
    rewards: &RewardModels,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if config.mode != TrainMode::Reward {
        return Err(Error::Config("train_step requires reward mode".into()));
    }
    let sched = config.schedule()?;
    let frames = frozen.config.frames;
    let leaves = frozen.leaves();
    let step = state.step;

    let outcome = (|| -> Result<(std::collections::BTreeMap<String, RawTensor>, LossBreakdown)> {
        let binding = AdapterBinding::trainable(&state.adapter);
        let grad_gate = crate::adapter::gate_start(state.adapter.gate_fraction, sched.steps);
        let mut icr_vals = Vec::new();
        let mut scr_vals = Vec::new();
        let mut totals = Vec::new();
        let mut first_frame_idx = 0usize;

        for b in 0..config.batch_size {
            let idx = (step * config.batch_size + b) as u64;
            let z_t = rng::standard_normal(
                &mut rng::stream(config.seed, "z_T", idx),
                noise_shape(frozen),
            );
            let prompt =
                sample_prompt(pool, &mut rng::stream(config.seed, "prompt", idx))?.clone();

            let target_latent = sample_video(
                &z_t,
                &prompt,
                frozen,
                Some(&binding),
                &sched,
                config.cfg_scale,
                Some(grad_gate),
            )?;
            let target_pixels = decode(&frozen.config, &leaves, &target_latent)?;

            let frame_idx =
                rng::stream(config.seed, "frame", idx).random_range(0..frames);
            if b == 0 {
                first_frame_idx = frame_idx;
            }
            let face = canonical_box(prompt.motion_id, frame_idx, frames);
            let ref_embeds = augmented_reference_embeddings(
                refs,
                rewards,
                config.augment_strength,
                &mut rng::stream(config.seed, "aug", idx),
            )?;
            let icr = icr_loss(
                &ref_embeds,
                &target_pixels.index_axis0(frame_idx),
                &rewards.reward_embedder,
                &face,
            )?;

            let scr = if config.scr_weight > 0.0 {
                let source_latent =
                    sample_video(&z_t, &prompt, frozen, None, &sched, config.cfg_scale, None)?;
                let source_pixels = decode(&frozen.config, &leaves, &source_latent)?;
                let picks = index_sample(
                    &mut rng::stream(config.seed, "scr", idx),
                    frames,
                    config.m_frames,
                );
                let target_frames: Vec<Tensor> =
                    picks.iter().map(|i| target_pixels.index_axis0(i)).collect();
                let source_frames: Vec<Tensor> =
                    picks.iter().map(|i| source_pixels.index_axis0(i)).collect();
                let target_dist = scr_distribution(&target_frames, &prompt, &rewards.scorer)?;
                let source_dist = scr_distribution(&source_frames, &prompt, &rewards.scorer)?;
                scr_loss(&target_dist, &source_dist)?
            } else {
                Tensor::scalar(0.0)
            };

            let icr_w = icr.affine(config.icr_weight, 0.0);
            let scr_w = scr.affine(config.scr_weight, 0.0);
            let sample_total = total_loss(&icr_w, &scr_w)?;
            icr_vals.push(icr_w.value().as_scalar());
            scr_vals.push(scr_w.value().as_scalar());
            totals.push(sample_total);
        }

        let loss = if totals.len() == 1 {
            totals.pop().expect("one sample")
        } else {
            Tensor::stack_scalars(&totals).mean()
        };
        let grads = loss.backward();
        let grad_map = adapter_gradients(&binding, &grads)?;
        let n = icr_vals.len() as f64;
        let breakdown = LossBreakdown::from_parts(
            icr_vals.iter().sum::<f64>() / n,
            scr_vals.iter().sum::<f64>() / n,
            first_frame_idx,
            config.m_frames,
        );
        Ok((grad_map, breakdown))
    })();

    match outcome {
        Ok((grad_map, breakdown)) => {
            let mut params = state.adapter.to_param_map();
            state.optimizer.step(&mut params, &grad_map)?;
            state.adapter.from_param_map(&params)?;
            state.step += 1;
            state.consecutive_aborts = 0;
            state.history.push(breakdown.clone());
            Ok(breakdown)
        }
        Err(e @ Error::NonFinite(_)) => {
            state.step += 1;
            state.consecutive_aborts += 1;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// One reconstruction update on the references themselves; the adapter is
/// ungated. The recorded breakdown carries the reconstruction term in the
/// first component (the semantic term does not exist on this path).
pub fn baseline_step(
    state: &mut TrainState,
    refs: &[(RawTensor, Rect)],
    prompts: &[PromptSpec],
    frozen: &DenoiserState,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if config.mode != TrainMode::Reconstruction {
        return Err(Error::Config("baseline_step requires reconstruction mode".into()));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("at least one prompt is required"));
    }
    let sched = config.schedule()?;
    let step = state.step;

    let outcome = (|| -> Result<(std::collections::BTreeMap<String, RawTensor>, LossBreakdown)> {
        let binding = AdapterBinding::trainable(&state.adapter);
        let mut totals = Vec::new();
        for b in 0..config.batch_size {
            let idx = (step * config.batch_size + b) as u64;
            let prompt = &prompts[rng::stream(config.seed, "prompt", idx)
                .random_range(0..prompts.len())];
            let images: Vec<RawTensor> = refs.iter().map(|(img, _)| img.clone()).collect();
            let loss = reconstruction_loss(
                &images,
                prompt,
                frozen,
                &binding,
                &sched,
                &mut rng::stream(config.seed, "recon", idx),
            )?;
            totals.push(loss);
        }
        let loss = if totals.len() == 1 {
            totals.pop().expect("one sample")
        } else {
            Tensor::stack_scalars(&totals).mean()
        };
        let value = loss.value().as_scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite("reconstruction loss".into()));
        }
        let grads = loss.backward();
        let grad_map = adapter_gradients(&binding, &grads)?;
        Ok((grad_map, LossBreakdown::from_parts(value, 0.0, 0, 0)))
    })();

    match outcome {
        Ok((grad_map, breakdown)) => {
            let mut params = state.adapter.to_param_map();
            state.optimizer.step(&mut params, &grad_map)?;
            state.adapter.from_param_map(&params)?;
            state.step += 1;
            state.consecutive_aborts = 0;
            state.history.push(breakdown.clone());
            Ok(breakdown)
        }
        Err(e @ Error::NonFinite(_)) => {
            state.step += 1;
            state.consecutive_aborts += 1;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn drive<S>(state: &mut TrainState, config: &TrainConfig, mut step_fn: S) -> Result<()>
where
    S: FnMut(&mut TrainState) -> Result<LossBreakdown>,
{
    while state.step < config.iterations {
        match step_fn(state) {
            Ok(_) => {}
            Err(Error::NonFinite(msg)) => {
                eprintln!(
                    "warning: step {} aborted on non-finite value ({msg}); state kept",
                    state.step.saturating_sub(1)
                );
                if state.consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
                    return Err(Error::NonFinite(format!(
                        "{MAX_CONSECUTIVE_ABORTS} consecutive aborted steps; last: {msg}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Continue a reward-mode fit until `config.iterations` steps have run.
/// Because every step derives its random draws from `(seed, step)`, resuming
/// from a checkpoint replays exactly the history an uninterrupted run logs.
pub fn resume(
    state: &mut TrainState,
    refs: &[(RawTensor, Rect)],
    pool: &PromptPool,
    frozen: &DenoiserState,
    rewards: &RewardModels,
    config: &TrainConfig,
) -> Result<()> {
    config.validate(frozen)?;
    drive(state, config, |s| train_step(s, refs, pool, frozen, rewards, config))
}

/// Fit an adapter with reward supervision from a fresh state.
pub fn fit(
    refs: &[(RawTensor, Rect)],
    pool: &PromptPool,
    frozen: &DenoiserState,
    rewards: &RewardModels,
    config: &TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::init(frozen, config)?;
    resume(&mut state, refs, pool, frozen, rewards, config)?;
    Ok(state)
}

/// Continue a reconstruction-mode fit until `config.iterations` steps.
pub fn baseline_resume(
    state: &mut TrainState,
    refs: &[(RawTensor, Rect)],
    prompts: &[PromptSpec],
    frozen: &DenoiserState,
    config: &TrainConfig,
) -> Result<()> {
    config.validate(frozen)?;
    drive(state, config, |s| baseline_step(s, refs, prompts, frozen, config))
}

/// Fit the reconstruction baseline (ungated adapter, denoising loss on the
/// references) from a fresh state.
pub fn baseline_fit(
    refs: &[(RawTensor, Rect)],
    prompts: &[PromptSpec],
    frozen: &DenoiserState,
    config: &TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::init(frozen, config)?;
    baseline_resume(&mut state, refs, prompts, frozen, config)?;
    Ok(state)
}

/// Render evaluation clips with an optional fitted adapter. Prompts cycle
/// through `prompts` so a small clip budget still covers the pool; noise is
/// drawn from `(seed, clip index)` streams so different adapters see the
/// same noise.
pub fn generate_videos(
    adapter: Option<&AdapterParams>,
    prompts: &[PromptSpec],
    frozen: &DenoiserState,
    config: &TrainConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<EvalVideo>> {
    if prompts.is_empty() {
        return Err(Error::invalid("at least one prompt is required"));
    }
    if count < 1 {
        return Err(Error::invalid("at least one clip is required"));
    }
    let sched = config.schedule()?;
    let leaves = frozen.leaves();
    let binding = adapter.map(AdapterBinding::frozen);
    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let z_t = rng::standard_normal(
            &mut rng::stream(seed, "eval.z_T", v as u64),
            noise_shape(frozen),
        );
        let prompt = prompts[v % prompts.len()].clone();
        let latent = sample_video(
            &z_t,
            &prompt,
            frozen,
            binding.as_ref(),
            &sched,
            config.cfg_scale,
            None,
        )?;
        let pixels = decode(&frozen.config, &leaves, &latent)?.value().clone();
        out.push(EvalVideo::from_generated(pixels, prompt)?);
    }
    Ok(out)
}

/// One ablation cell: which factors differ from the base configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub gate_fraction: f64,
    pub target_kinds: BTreeSet<AttnKind>,
    pub scr_on: bool,
    pub aug_on: bool,
}

/// Outcome of one cell: a metric row, or the error that stopped it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Shared inputs every ablation cell trains and evaluates against.
#[derive(Debug)]
pub struct AblationContext<'a> {
    pub refs: &'a [(RawTensor, Rect)],
    pub pool: &'a PromptPool,
    /// Prompt used when augmentation is ablated away (a plain subject
    /// prompt, independent of the pool).
    pub bare_prompt: PromptSpec,
    pub frozen: &'a DenoiserState,
    pub rewards: &'a RewardModels,
    /// Corpus clips the Fréchet term compares against.
    pub reference_videos: &'a [EvalVideo],
    pub eval_clips: usize,
    pub eval_seed: u64,
}

/// Train and evaluate one adapter per cell. Cells share the training seed
/// and the evaluation noise streams, so row differences are attributable to
/// the ablated factors; a failing cell records its error and the grid moves
/// on.
pub fn run_ablation_grid(
    ctx: &AblationContext,
    base: &TrainConfig,
    cells: &[AblationCell],
) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|cell| match run_cell(ctx, base, cell) {
            Ok(report) => {
                AblationRow { cell: cell.clone(), report: Some(report), error: None }
            }
            Err(e) => AblationRow { cell: cell.clone(), report: None, error: Some(e.to_string()) },
        })
        .collect()
}

fn run_cell(ctx: &AblationContext, base: &TrainConfig, cell: &AblationCell) -> Result<MetricsReport> {
    let mut config = base.clone();
    config.gate_fraction = cell.gate_fraction;
    config.target_kinds = cell.target_kinds.clone();
    if !cell.scr_on {
        config.scr_weight = 0.0;
    }
    let bare_pool;
    let pool = if cell.aug_on {
        ctx.pool
    } else {
        // Augmentation off: no crop jitter and a single fixed prompt.
        config.augment_strength = 0.0;
        bare_pool = PromptPool { prompts: vec![ctx.bare_prompt.clone()], seed: ctx.pool.seed };
        &bare_pool
    };
    let state = fit(ctx.refs, pool, ctx.frozen, ctx.rewards, &config)?;
    let videos = generate_videos(
        Some(&state.adapter),
        &ctx.pool.prompts,
        ctx.frozen,
        &config,
        ctx.eval_clips,
        ctx.eval_seed,
    )?;
    let run = RunSpec { label: cell.label.clone(), videos: &videos, refs: ctx.refs };
    evaluate_run(&run, ctx.reference_videos, ctx.rewards)
}
