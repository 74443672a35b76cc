//! The pinned desk-scale scenario and denoiser pretraining.
//!
//! One named preset ties the pipeline together — corpus size and seed, model
//! dimensions, pretraining knobs, reward-fitting seed, prompt pool, and the
//! personalization defaults — so "the standard run" means the same thing to
//! the command line, the tests, and anyone reading a run directory.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::error::{Error, Result};
use crate::model::{
    decode, diffusion_loss, encode_video, render_condition, uncond_condition, DenoiserState,
    ModelConfig,
};
use crate::optim::{AdamW, OptimConfig};
use crate::prompts::{build_prompt_pool, GrammarConfig, PromptPool, DEFAULT_POOL_SIZE};
use crate::rng;
use crate::schedule::{make_schedule, ScheduleKind};
use crate::trainer::TrainConfig;
use crate::world::{make_corpus, make_references, Corpus, Identity, Rect};

pub const STANDARD_IDENTITIES: usize = 10;
pub const STANDARD_VIDEOS_PER_IDENTITY: usize = 4;
pub const STANDARD_HELDOUT_IDENTITIES: usize = 2;
pub const STANDARD_CORPUS_SEED: u64 = 101;
pub const STANDARD_PRETRAIN_SEED: u64 = 202;
pub const STANDARD_REWARDS_SEED: u64 = 303;
pub const STANDARD_TRAIN_SEED: u64 = 404;
pub const STANDARD_EVAL_SEED: u64 = 505;
pub const STANDARD_POOL_SEED: u64 = 606;
pub const STANDARD_REFERENCES_SEED: u64 = 707;
/// Clips rendered per model when an evaluation runs.
pub const STANDARD_EVAL_CLIPS: usize = 8;

/// Denoiser pretraining knobs. The loop draws one corpus video per step,
/// trains the encoder/decoder pair as an autoencoder, and trains the
/// denoiser on noise prediction at a uniformly drawn level; the condition
/// is dropped at a fixed rate so guided sampling has an unconditional
/// branch worth subtracting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub optim: OptimConfig,
    pub schedule: ScheduleKind,
    pub sampler_steps: usize,
    /// Probability a step trains the unconditional branch.
    pub cond_dropout: f64,
    /// Weight of the pixel-reconstruction term next to noise prediction.
    pub recon_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 400,
            optim: OptimConfig { learning_rate: 2e-3, ..OptimConfig::default() },
            schedule: ScheduleKind::Cosine,
            sampler_steps: 16,
            cond_dropout: 0.1,
            recon_weight: 1.0,
            seed: STANDARD_PRETRAIN_SEED,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.iterations < 1 {
            return Err(Error::invalid("pretraining needs at least 1 iteration"));
        }
        if self.sampler_steps < 1 {
            return Err(Error::invalid("the schedule needs at least 1 step"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!(
                "condition dropout must lie in [0,1], got {}",
                self.cond_dropout
            )));
        }
        if !self.recon_weight.is_finite() || self.recon_weight < 0.0 {
            return Err(Error::invalid(format!(
                "reconstruction weight must be finite and nonnegative, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// Everything a full pipeline run needs, with every seed pinned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub identities: usize,
    pub videos_per_identity: usize,
    pub heldout_identities: usize,
    pub corpus_seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub rewards_seed: u64,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub references_seed: u64,
    pub eval_seed: u64,
    pub eval_clips: usize,
    pub train: TrainConfig,
}

impl Scenario {
    /// The standard desk-scale preset: 10 identities (2 held out), 4 videos
    /// each, 4 references, 16 sampler steps, 16 frames, 8 scored frames,
    /// rank 4, gate fraction 1/4, 300 iterations, a 50-prompt pool.
    pub fn standard() -> Scenario {
        Scenario {
            identities: STANDARD_IDENTITIES,
            videos_per_identity: STANDARD_VIDEOS_PER_IDENTITY,
            heldout_identities: STANDARD_HELDOUT_IDENTITIES,
            corpus_seed: STANDARD_CORPUS_SEED,
            model: ModelConfig::toy_default(),
            pretrain: PretrainConfig::default(),
            rewards_seed: STANDARD_REWARDS_SEED,
            pool_size: DEFAULT_POOL_SIZE,
            pool_seed: STANDARD_POOL_SEED,
            references_seed: STANDARD_REFERENCES_SEED,
            eval_seed: STANDARD_EVAL_SEED,
            eval_clips: STANDARD_EVAL_CLIPS,
            train: TrainConfig { seed: STANDARD_TRAIN_SEED, ..TrainConfig::default() },
        }
    }

    pub fn build_corpus(&self) -> Result<Corpus> {
        make_corpus(
            self.identities,
            self.videos_per_identity,
            self.heldout_identities,
            self.corpus_seed,
        )
    }

    pub fn build_pool(&self) -> Result<PromptPool> {
        build_prompt_pool(self.pool_size, &GrammarConfig::default(), self.pool_seed)
    }

    /// The held-out identity at `index` with its reference images, the
    /// personalization subject the corpus never shows the model.
    pub fn heldout_references(
        &self,
        corpus: &Corpus,
        index: usize,
    ) -> Result<(Identity, Vec<(RawTensor, Rect)>)> {
        let identity = corpus.heldout_identities.get(index).cloned().ok_or_else(|| {
            Error::invalid(format!(
                "held-out index {index} out of range ({} available)",
                corpus.heldout_identities.len()
            ))
        })?;
        let refs = make_references(&identity, self.train.k_references, self.references_seed)?;
        Ok((identity, refs))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub diffusion: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub iterations: usize,
    /// Mean total over the first up-to-10 steps.
    pub initial_total: f64,
    /// Mean total over the last up-to-10 steps.
    pub final_total: f64,
    pub history: Vec<PretrainRecord>,
}

/// Train a denoiser (with its encoder/decoder) from scratch on the corpus.
/// Deterministic as a function of `(model, config, corpus)`; a non-finite
/// loss fails the run outright, since a from-scratch model that diverges
/// signals a bad configuration rather than a transient step.
pub fn pretrain(
    corpus: &Corpus,
    model: &ModelConfig,
    config: &PretrainConfig,
) -> Result<(DenoiserState, PretrainReport)> {
    model.validate()?;
    config.validate()?;
    if corpus.train_videos.is_empty() {
        return Err(Error::invalid("corpus has no training videos"));
    }
    let want = [model.frames, model.pixel_h, model.pixel_w, 3];
    for (i, video) in corpus.train_videos.iter().enumerate() {
        if video.frames.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "corpus video {i} shaped {:?}, the model trains on {want:?}",
                video.frames.shape()
            )));
        }
    }
    let sched = make_schedule(config.sampler_steps, config.schedule)?;
    let mut params = DenoiserState::init_random(model.clone(), config.seed)?.params;
    let mut optimizer = AdamW::new(config.optim.clone())?;
    let mut history = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let mut stream = rng::stream(config.seed, "pretrain", step as u64);
        let video = &corpus.train_videos[stream.random_range(0..corpus.train_videos.len())];
        let drop_condition = stream.random::<f64>() < config.cond_dropout;

        let vars: BTreeMap<String, Tensor> =
            params.iter().map(|(k, v)| (k.clone(), Tensor::var(v.clone()))).collect();
        let frames = Tensor::leaf(video.frames.clone());
        let z0 = encode_video(model, &vars, &frames)?;
        let decoded = decode(model, &vars, &z0)?;
        let diff_px = frames.sub(&decoded);
        let recon = diff_px.mul(&diff_px).mean();

        let cond = if drop_condition {
            uncond_condition(model, &vars)?
        } else {
            render_condition(&video.prompt, model, &vars)?
        };
        // The denoiser learns against the current encoder's latents but does
        // not steer the encoder: the autoencoder term owns that pair.
        let z0_fixed = Tensor::leaf(z0.value().clone());
        let diffusion = diffusion_loss(model, &vars, None, &z0_fixed, &cond, &sched, &mut stream)?;

        let total = diffusion.add(&recon.affine(config.recon_weight, 0.0));
        if !total.value().is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let grads = total.backward();
        let grad_map: BTreeMap<String, RawTensor> =
            vars.iter().map(|(k, t)| (k.clone(), grads.get_or_zeros(t))).collect();
        optimizer.step(&mut params, &grad_map)?;

        history.push(PretrainRecord {
            step,
            diffusion: diffusion.value().as_scalar(),
            reconstruction: recon.value().as_scalar(),
            total: total.value().as_scalar(),
        });
    }

    let window = history.len().min(10);
    let mean = |slice: &[PretrainRecord]| {
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    };
    let report = PretrainReport {
        iterations: config.iterations,
        initial_total: mean(&history[..window]),
        final_total: mean(&history[history.len() - window..]),
        history,
    };
    Ok((DenoiserState { config: model.clone(), params }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{DEFAULT_GATE_FRACTION, DEFAULT_RANK};

    fn narrow_model() -> ModelConfig {
        ModelConfig { width: 4, blocks: 1, latent_c: 2, ..ModelConfig::toy_default() }
    }

    #[test]
    fn standard_preset_pins_the_documented_values() {
        let s = Scenario::standard();
        assert_eq!(s.identities, 10);
        assert_eq!(s.videos_per_identity, 4);
        assert_eq!(s.heldout_identities, 2);
        assert_eq!(s.pool_size, 50);
        assert_eq!(s.model.frames, 16);
        assert_eq!(s.train.sampler_steps, 16);
        assert_eq!(s.train.m_frames, 8);
        assert_eq!(s.train.k_references, 4);
        assert_eq!(s.train.iterations, 300);
        assert_eq!(s.train.rank, DEFAULT_RANK);
        assert_eq!(s.train.gate_fraction, DEFAULT_GATE_FRACTION);
        assert_eq!(s.train.cfg_scale, 7.5);

        let corpus = make_corpus(3, 2, 1, s.corpus_seed).unwrap();
        let (identity, refs) = s.heldout_references(&corpus, 0).unwrap();
        assert_eq!(refs.len(), s.train.k_references);
        assert_eq!(identity.id_seed, corpus.heldout_identities[0].id_seed);
        assert!(s.heldout_references(&corpus, 5).is_err());
    }

    #[test]
    fn pretraining_reduces_the_training_loss() {
        let corpus = make_corpus(2, 2, 1, 9).unwrap();
        let model = narrow_model();
        let config = PretrainConfig {
            iterations: 30,
            optim: OptimConfig { learning_rate: 3e-3, ..OptimConfig::default() },
            ..PretrainConfig::default()
        };
        let (state, report) = pretrain(&corpus, &model, &config).unwrap();

        assert_eq!(report.history.len(), 30);
        assert!(report.history.iter().all(|r| r.total.is_finite()
            && r.diffusion >= 0.0
            && r.reconstruction >= 0.0));
        assert!(
            report.final_total < report.initial_total,
            "loss should fall: {} -> {}",
            report.initial_total,
            report.final_total
        );
        assert!(state.params.values().all(|t| t.is_finite()));
    }

    #[test]
    fn pretraining_is_deterministic_in_the_seed() {
        let corpus = make_corpus(2, 2, 1, 10).unwrap();
        let model = narrow_model();
        let config = PretrainConfig { iterations: 6, ..PretrainConfig::default() };
        let (a, ra) = pretrain(&corpus, &model, &config).unwrap();
        let (b, rb) = pretrain(&corpus, &model, &config).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        for (x, y) in ra.history.iter().zip(rb.history.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }

        let other = PretrainConfig { seed: config.seed + 1, ..config };
        let (c, _) = pretrain(&corpus, &model, &other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn pretraining_rejects_corpus_and_model_disagreement() {
        let corpus = make_corpus(2, 2, 1, 11).unwrap();
        let short = ModelConfig { frames: 8, ..narrow_model() };
        match pretrain(&corpus, &short, &PretrainConfig::default()) {
            Err(Error::ShapeMismatch(msg)) => assert!(msg.contains("video 0")),
            other => panic!("expected a shape mismatch, got {other:?}"),
        }
    }
}
