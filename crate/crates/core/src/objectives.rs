//! Training objectives for adapter fitting.
//!
//! Two reward terms drive personalization: an identity term that pulls the
//! face crop of a generated frame toward reference embeddings, and a semantic
//! term that keeps the per-frame score distribution of the adapted model
//! aligned with the frozen base model. The classical reconstruction loss is
//! provided as the baseline alternative.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::adapter::AdapterBinding;
use crate::error::{Error, Result};
use crate::model::{diffusion_loss, encode_video, render_condition, DenoiserState};
use crate::prompts::PromptSpec;
use crate::rewards::{crop_face, score_semantic, IdentityEmbedder, SemanticScorer};
use crate::schedule::NoiseSchedule;
use crate::world::Rect;

/// Smallest admissible probability inside the divergence logarithm. Source
/// probabilities below this are clamped (with a warning) rather than allowed
/// to produce infinities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for the unit-norm precondition on reference embeddings.
const UNIT_NORM_TOL: f64 = 1e-6;

/// Softmax over per-frame semantic scores, kept alongside the raw scores so
/// the divergence stays differentiable with respect to them.
#[derive(Debug, Clone)]
pub struct ScoreDistribution {
    /// Raw pre-softmax frame scores, shape `[m]`.
    pub scores: Tensor,
    /// `softmax(scores)`, shape `[m]`; nonnegative, sums to one.
    pub probs: Tensor,
    /// Number of frames scored.
    pub m: usize,
}

impl ScoreDistribution {
    /// Build the distribution from raw frame scores (`[m]`, m >= 2).
    pub fn from_scores(scores: Tensor) -> Result<Self> {
        let shape = scores.shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "frame scores must be a vector, got {shape:?}"
            )));
        }
        let m = shape[0];
        if m < 2 {
            return Err(Error::invalid(format!(
                "a score distribution needs at least 2 frames, got {m}"
            )));
        }
        if scores.value().data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame scores".into()));
        }
        let probs = scores.softmax_last();
        Ok(ScoreDistribution { scores, probs, m })
    }

    /// Probability values as plain numbers, for logging and assertions.
    pub fn prob_values(&self) -> Vec<f64> {
        self.probs.value().data().to_vec()
    }
}

/// Per-step loss record written to training logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub icr: f64,
    pub scr: f64,
    pub total: f64,
    pub frame_index_used: usize,
    pub m_used: usize,
}

impl LossBreakdown {
    pub fn from_parts(icr: f64, scr: f64, frame_index_used: usize, m_used: usize) -> Self {
        LossBreakdown { icr, scr, total: icr + scr, frame_index_used, m_used }
    }
}

/// Identity consistency loss: `1 - mean_k cos(ref_k, embed(crop(frame)))`.
///
/// References and the embedder output are unit-norm, so each cosine is a
/// plain dot product and the result lies in `[0, 2]`. Differentiable with
/// respect to `frame`; the embedder itself is frozen.
pub fn icr_loss(
    ref_embeddings: &[RawTensor],
    frame: &Tensor,
    embedder: &IdentityEmbedder,
    face_box: &Rect,
) -> Result<Tensor> {
    if ref_embeddings.is_empty() {
        return Err(Error::invalid("identity loss needs at least one reference embedding"));
    }
    for (k, r) in ref_embeddings.iter().enumerate() {
        let norm = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "reference embedding {k} must be unit-norm, got |r| = {norm}"
            )));
        }
    }
    let crop = crop_face(frame, face_box)?;
    let e = embedder.embed(&crop);
    let cosines: Vec<Tensor> =
        ref_embeddings.iter().map(|r| e.dot(&Tensor::leaf(r.clone()))).collect();
    let mean_cos = Tensor::stack_scalars(&cosines).mean();
    Ok(mean_cos.affine(-1.0, 1.0))
}

/// Score a batch of frames against one prompt and softmax the results.
pub fn scr_distribution(
    frames: &[Tensor],
    prompt: &PromptSpec,
    scorer: &SemanticScorer,
) -> Result<ScoreDistribution> {
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "semantic alignment needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let scores: Vec<Tensor> =
        frames.iter().map(|f| score_semantic(scorer, f, prompt)).collect::<Result<_>>()?;
    ScoreDistribution::from_scores(Tensor::stack_scalars(&scores))
}

/// Semantic consistency loss: `KL(target || source)` over frame-score
/// distributions.
///
/// Nonnegative, zero exactly when the distributions agree, differentiable
/// with respect to the target scores. Source probabilities are treated as
/// constants; any below [`PROB_FLOOR`] are clamped with a warning so a
/// collapsed source frame cannot produce an infinite loss.
pub fn scr_loss(target: &ScoreDistribution, source: &ScoreDistribution) -> Result<Tensor> {
    if target.m != source.m {
        return Err(Error::invalid(format!(
            "frame-count mismatch: target has {}, source has {}",
            target.m, source.m
        )));
    }
    let source_probs = source.prob_values();
    let target_probs = target.prob_values();
    let mut terms: Vec<Tensor> = Vec::with_capacity(target.m);
    for i in 0..target.m {
        let mut q = source_probs[i];
        if q < PROB_FLOOR {
            eprintln!(
                "warning: source frame probability {q:.3e} at index {i} clamped to {PROB_FLOOR:.0e}"
            );
            q = PROB_FLOOR;
        }
        // p * ln(p/q) -> 0 as p -> 0, so a vanished target probability
        // contributes nothing and is skipped rather than sent through ln(0).
        if target_probs[i] < PROB_FLOOR {
            continue;
        }
        let p = target.probs.index_axis0(i);
        terms.push(p.mul(&p.ln().affine(1.0, -q.ln())));
    }
    if terms.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(Tensor::stack_scalars(&terms).sum())
}

/// Combined objective: plain sum of the identity and semantic terms.
pub fn total_loss(icr: &Tensor, scr: &Tensor) -> Result<Tensor> {
    for (name, t) in [("identity", icr), ("semantic", scr)] {
        if t.shape() != [] as [usize; 0] {
            return Err(Error::ShapeMismatch(format!(
                "{name} loss must be a scalar, got {:?}",
                t.shape()
            )));
        }
        if !t.value().as_scalar().is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    Ok(icr.add(scr))
}

/// Noise-prediction loss on the reference images themselves: each reference
/// is encoded as a single-frame latent and scored with the standard denoising
/// objective, adapter applied at every level (reconstruction fits are never
/// step-gated). Returns the mean over references.
pub fn reconstruction_loss(
    ref_images: &[RawTensor],
    prompt: &PromptSpec,
    state: &DenoiserState,
    adapter: &AdapterBinding,
    sched: &NoiseSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    if ref_images.is_empty() {
        return Err(Error::invalid("reconstruction needs at least one reference image"));
    }
    adapter.spec.validate_against(state)?;
    let params: BTreeMap<String, Tensor> = state.leaves();
    let cond = render_condition(prompt, &state.config, &params)?;
    let mut losses = Vec::with_capacity(ref_images.len());
    for img in ref_images {
        let s = img.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "reference image must be [H, W, 3], got {s:?}"
            )));
        }
        let px = Tensor::leaf(img.clone()).reshape(vec![1, s[0], s[1], 3]);
        let z0 = encode_video(&state.config, &params, &px)?;
        losses.push(diffusion_loss(
            &state.config,
            &params,
            Some(&adapter.tensors),
            &z0,
            &cond,
            sched,
            rng,
        )?);
    }
    if losses.len() == 1 {
        return Ok(losses.pop().expect("one loss"));
    }
    Ok(Tensor::stack_scalars(&losses).mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter;
    use crate::model::{AttnKind, ModelConfig};
    use crate::rewards::fit_reward_models;
    use crate::rng;
    use crate::schedule::{make_schedule, ScheduleKind};
    use crate::world::{make_corpus, BackgroundId, MotionId};
    use rand::Rng;
    use std::collections::BTreeSet;

    fn unit_vec(seed: u64, d: usize) -> RawTensor {
        let v = rng::standard_normal(&mut rng::stream(seed, "unit", 0), vec![d]);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        RawTensor::new(vec![d], v.data().iter().map(|x| x / norm).collect())
    }

    fn test_embedder() -> IdentityEmbedder {
        let corpus = make_corpus(3, 2, 1, 5).unwrap();
        let models = fit_reward_models(&corpus, 11).unwrap().0;
        models.reward_embedder
    }

    fn random_frame(seed: u64, h: usize, w: usize) -> RawTensor {
        let raw = rng::standard_normal(&mut rng::stream(seed, "frame", 0), vec![h, w, 3]);
        RawTensor::new(vec![h, w, 3], raw.data().iter().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)).collect())
    }

    fn full_box() -> Rect {
        Rect { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }
    }

    #[test]
    fn identity_loss_hits_its_analytic_anchors() {
        let embedder = test_embedder();
        let frame = Tensor::leaf(random_frame(3, 8, 8));
        let b = full_box();

        // Reference equal to the crop's own embedding: cosine 1, loss 0.
        let own = embedder.embed(&crop_face(&frame, &b).unwrap()).value().clone();
        let loss = icr_loss(&[own.clone()], &frame, &embedder, &b).unwrap();
        assert!(loss.value().as_scalar().abs() < 1e-12, "self-reference loss {loss:?}");

        // Reference orthogonal to it: cosine 0, loss 1.
        let e = own.data();
        let mut basis = vec![0.0; e.len()];
        basis[0] = 1.0;
        let proj: f64 = e[0];
        let mut orth: Vec<f64> = basis.iter().zip(e).map(|(b, ei)| b - proj * ei).collect();
        let norm = orth.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut orth {
            *v /= norm;
        }
        let loss =
            icr_loss(&[RawTensor::new(vec![e.len()], orth)], &frame, &embedder, &b).unwrap();
        assert!((loss.value().as_scalar() - 1.0).abs() < 1e-9, "orthogonal loss {loss:?}");

        // Random unit references stay within [0, 2], and the mean over
        // references matches averaging individual losses.
        let refs: Vec<RawTensor> = (0..4).map(|k| unit_vec(40 + k, e.len())).collect();
        let joint = icr_loss(&refs, &frame, &embedder, &b).unwrap().value().as_scalar();
        assert!((0.0..=2.0).contains(&joint), "loss {joint} outside [0,2]");
        let mean_single: f64 = refs
            .iter()
            .map(|r| icr_loss(&[r.clone()], &frame, &embedder, &b).unwrap().value().as_scalar())
            .sum::<f64>()
            / refs.len() as f64;
        assert!((joint - mean_single).abs() < 1e-12);

        assert!(matches!(icr_loss(&[], &frame, &embedder, &b), Err(Error::InvalidArgument(_))));
        let long = RawTensor::new(vec![e.len()], vec![1.0; e.len()]);
        assert!(matches!(
            icr_loss(&[long], &frame, &embedder, &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_loss_gradient_matches_finite_differences() {
        let embedder = test_embedder();
        let b = full_box();
        let reference = unit_vec(9, 16);
        let base = random_frame(17, 8, 8);

        let eval = |vals: &RawTensor| -> f64 {
            let frame = Tensor::leaf(vals.clone());
            icr_loss(&[reference.clone()], &frame, &embedder, &b).unwrap().value().as_scalar()
        };

        let frame = Tensor::var(base.clone());
        let loss = icr_loss(&[reference.clone()], &frame, &embedder, &b).unwrap();
        let grads = loss.backward();
        let g = grads.get(&frame).expect("frame gradient");

        let mut r = rng::stream(23, "probe", 0);
        let h = 1e-5;
        for _ in 0..6 {
            let idx = r.random_range(0..base.data().len());
            let mut plus = base.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (eval(&RawTensor::new(base.shape().to_vec(), plus))
                - eval(&RawTensor::new(base.shape().to_vec(), minus)))
                / (2.0 * h);
            let an = g.data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "pixel {idx}: finite-difference {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn score_distribution_matches_hand_softmax() {
        // Hand softmax: scores (ln 2, 0) exponentiate to (2, 1).
        let d = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
            vec![2],
            vec![2.0f64.ln(), 0.0],
        )))
        .unwrap();
        let p = d.prob_values();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-9);

        // Equal scores give the uniform distribution.
        let u = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
            vec![5],
            vec![0.7; 5],
        )))
        .unwrap();
        for p in u.prob_values() {
            assert!((p - 0.2).abs() < 1e-12);
        }

        // Random scores: probabilities are nonnegative, sum to one, and are
        // invariant to a constant shift of every score.
        let mut r = rng::stream(31, "scores", 0);
        for round in 0..20 {
            let m = 2 + round % 7;
            let scores: Vec<f64> = (0..m).map(|_| r.random_range(-4.0..4.0)).collect();
            let shift: f64 = r.random_range(-10.0..10.0);
            let d = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
                vec![m],
                scores.clone(),
            )))
            .unwrap();
            let d2 = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
                vec![m],
                scores.iter().map(|s| s + shift).collect(),
            )))
            .unwrap();
            let (p, p2) = (d.prob_values(), d2.prob_values());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..m {
                assert!(p[i] >= 0.0);
                assert!((p[i] - p2[i]).abs() < 1e-9, "shift changed probabilities");
            }
        }

        let one = Tensor::leaf(RawTensor::new(vec![1], vec![0.0]));
        assert!(matches!(ScoreDistribution::from_scores(one), Err(Error::InvalidArgument(_))));
        let nan = Tensor::leaf(RawTensor::new(vec![2], vec![f64::NAN, 0.0]));
        assert!(matches!(ScoreDistribution::from_scores(nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn divergence_matches_hand_value_and_is_nonnegative() {
        let dist = |scores: Vec<f64>| {
            ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
                vec![scores.len()],
                scores,
            )))
            .unwrap()
        };

        // Identical distributions diverge by zero.
        let a = dist(vec![0.3, -1.2, 0.8]);
        let b = dist(vec![0.3, -1.2, 0.8]);
        assert!(scr_loss(&a, &b).unwrap().value().as_scalar().abs() < 1e-12);

        // Hand value: target (1/2, 1/2) vs source (1/4, 3/4) gives
        // 0.5 ln 2 + 0.5 ln(2/3).
        let target = dist(vec![0.0, 0.0]);
        let source = dist(vec![0.0, 3.0f64.ln()]);
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0 / 3.0f64).ln();
        let got = scr_loss(&target, &source).unwrap().value().as_scalar();
        assert!((got - expect).abs() < 1e-12, "divergence {got}, expected {expect}");
        assert!((got - 0.14384).abs() < 1e-5);

        // Nonnegative for random pairs; zero only when probabilities agree.
        let mut r = rng::stream(77, "kl", 0);
        for round in 0..30 {
            let m = 2 + round % 6;
            let s1: Vec<f64> = (0..m).map(|_| r.random_range(-3.0..3.0)).collect();
            let s2: Vec<f64> = (0..m).map(|_| r.random_range(-3.0..3.0)).collect();
            let (t, s) = (dist(s1), dist(s2));
            let kl = scr_loss(&t, &s).unwrap().value().as_scalar();
            assert!(kl >= 0.0, "negative divergence {kl}");
            let max_gap = t
                .prob_values()
                .iter()
                .zip(s.prob_values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if kl < 1e-12 {
                assert!(max_gap < 1e-6, "zero divergence but gap {max_gap}");
            }
        }

        let short = dist(vec![0.0, 1.0]);
        let long = dist(vec![0.0, 1.0, 2.0]);
        assert!(matches!(scr_loss(&short, &long), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn divergence_gradient_matches_finite_differences() {
        let source = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
            vec![4],
            vec![0.4, -0.2, 1.1, 0.0],
        )))
        .unwrap();
        let base = vec![0.9, 0.1, -0.6, 0.3];

        let eval = |scores: &[f64]| -> f64 {
            let t = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
                vec![4],
                scores.to_vec(),
            )))
            .unwrap();
            scr_loss(&t, &source).unwrap().value().as_scalar()
        };

        let scores = Tensor::var(RawTensor::new(vec![4], base.clone()));
        let target = ScoreDistribution::from_scores(scores.clone()).unwrap();
        let loss = scr_loss(&target, &source).unwrap();
        let grads = loss.backward();
        let g = grads.get(&scores).expect("score gradient");

        let h = 1e-6;
        for idx in 0..4 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "score {idx}: finite-difference {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn divergence_clamps_a_collapsed_source_probability() {
        // A source score gap of 800 underflows softmax to exactly zero.
        let source = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
            vec![2],
            vec![0.0, 800.0],
        )))
        .unwrap();
        assert_eq!(source.prob_values()[0], 0.0);
        let target = ScoreDistribution::from_scores(Tensor::leaf(RawTensor::new(
            vec![2],
            vec![0.0, 0.0],
        )))
        .unwrap();
        let kl = scr_loss(&target, &source).unwrap().value().as_scalar();
        assert!(kl.is_finite());
        // Floored source is (1e-12, 1): the divergence from the uniform
        // target is 0.5 ln(0.5/1e-12) + 0.5 ln(0.5/1).
        let expect = 0.5 * (0.5 / PROB_FLOOR).ln() + 0.5 * 0.5f64.ln();
        assert!((kl - expect).abs() < 1e-9, "clamped divergence {kl}, expected {expect}");
    }

    #[test]
    fn total_adds_components_and_rejects_nonfinite() {
        let zero = total_loss(&Tensor::scalar(0.0), &Tensor::scalar(0.0)).unwrap();
        assert_eq!(zero.value().as_scalar(), 0.0);
        let sum = total_loss(&Tensor::scalar(0.3), &Tensor::scalar(0.2)).unwrap();
        assert!((sum.value().as_scalar() - 0.5).abs() < 1e-15);

        // Linearity: the gradient of the sum w.r.t. a shared variable equals
        // the sum of the component gradients.
        let x = Tensor::var(RawTensor::new(vec![3], vec![0.4, -1.0, 0.7]));
        let icr = x.mul(&x).sum();
        let scr = x.sum().mul(&Tensor::scalar(2.0));
        let g_icr = icr.backward().get(&x).unwrap().data().to_vec();
        let g_scr = scr.backward().get(&x).unwrap().data().to_vec();
        let total = total_loss(&icr, &scr).unwrap();
        let g_total = total.backward().get(&x).unwrap().data().to_vec();
        for i in 0..3 {
            assert!((g_total[i] - (g_icr[i] + g_scr[i])).abs() < 1e-9);
        }

        assert!(matches!(
            total_loss(&Tensor::scalar(f64::NAN), &Tensor::scalar(0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            total_loss(&Tensor::scalar(0.0), &Tensor::scalar(f64::INFINITY)),
            Err(Error::NonFinite(_))
        ));
        let vec_loss = Tensor::leaf(RawTensor::new(vec![2], vec![0.0, 0.0]));
        assert!(matches!(
            total_loss(&vec_loss, &Tensor::scalar(0.0)),
            Err(Error::ShapeMismatch(_))
        ));

        let b = LossBreakdown::from_parts(0.25, 0.5, 3, 8);
        assert!((b.total - (b.icr + b.scr)).abs() < 1e-9);
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            latent_h: 4,
            latent_w: 4,
            latent_c: 2,
            frames: 3,
            width: 8,
            text_width: 16,
            pixel_h: 8,
            pixel_w: 8,
            blocks: 1,
            identity_decoder: false,
        }
    }

    #[test]
    fn reconstruction_reduces_to_single_frame_denoising_loss() {
        let cfg = tiny_cfg();
        let state = DenoiserState::init_random(cfg.clone(), 21).unwrap();
        let kinds: BTreeSet<AttnKind> = [AttnKind::SelfAttn].into();
        let spec = init_adapter(&state, 2, 1.0, kinds, 3).unwrap();
        let binding = AdapterBinding::trainable(&spec);
        let sched = make_schedule(6, ScheduleKind::Linear).unwrap();
        let prompt = PromptSpec::new("V", "", MotionId::OrbitSmall, BackgroundId::Meadow);
        let img = random_frame(51, 8, 8);

        let mut r1 = rng::stream(63, "recon", 0);
        let loss =
            reconstruction_loss(&[img.clone()], &prompt, &state, &binding, &sched, &mut r1)
                .unwrap();

        // Same rng stream, hand-built single-frame latent: definitional match.
        let mut r2 = rng::stream(63, "recon", 0);
        let params = state.leaves();
        let px = Tensor::leaf(img.clone()).reshape(vec![1, 8, 8, 3]);
        let z0 = encode_video(&cfg, &params, &px).unwrap();
        let cond = render_condition(&prompt, &cfg, &params).unwrap();
        let direct =
            diffusion_loss(&cfg, &params, Some(&binding.tensors), &z0, &cond, &sched, &mut r2)
                .unwrap();
        assert_eq!(loss.value().as_scalar(), direct.value().as_scalar());

        // Several references average their individual losses.
        let imgs: Vec<RawTensor> = (0..3).map(|k| random_frame(60 + k, 8, 8)).collect();
        let mut r3 = rng::stream(64, "recon", 0);
        let joint = reconstruction_loss(&imgs, &prompt, &state, &binding, &sched, &mut r3)
            .unwrap()
            .value()
            .as_scalar();
        let mut r4 = rng::stream(64, "recon", 0);
        let singles: f64 = imgs
            .iter()
            .map(|im| {
                reconstruction_loss(&[im.clone()], &prompt, &state, &binding, &sched, &mut r4)
                    .unwrap()
                    .value()
                    .as_scalar()
            })
            .sum::<f64>()
            / imgs.len() as f64;
        assert!((joint - singles).abs() < 1e-12);

        let mut r5 = rng::stream(65, "recon", 0);
        assert!(matches!(
            reconstruction_loss(&[], &prompt, &state, &binding, &sched, &mut r5),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reconstruction_gradient_reaches_only_the_adapter() {
        let cfg = tiny_cfg();
        let state = DenoiserState::init_random(cfg.clone(), 22).unwrap();
        let kinds: BTreeSet<AttnKind> = [AttnKind::SelfAttn].into();
        let mut spec = init_adapter(&state, 2, 1.0, kinds, 4).unwrap();
        // Zero-init up-projections would hide the down-side gradient; give
        // every factor small random values instead.
        let mut r = rng::stream(91, "fill", 0);
        for pair in spec.entries.values_mut() {
            let d = rng::standard_normal(&mut r, pair.down.shape().to_vec());
            let u = rng::standard_normal(&mut r, pair.up.shape().to_vec());
            pair.down = RawTensor::new(d.shape().to_vec(), d.data().iter().map(|v| v * 0.05).collect());
            pair.up = RawTensor::new(u.shape().to_vec(), u.data().iter().map(|v| v * 0.05).collect());
        }
        let sched = make_schedule(6, ScheduleKind::Linear).unwrap();
        let prompt = PromptSpec::new("V", "", MotionId::Bounce, BackgroundId::Night);
        let img = random_frame(52, 8, 8);

        let key = spec.entries.keys().next().unwrap().clone();
        let eval = |entry_down: &RawTensor| -> f64 {
            let mut s = spec.clone();
            s.entries.get_mut(&key).unwrap().down = entry_down.clone();
            let b = AdapterBinding::trainable(&s);
            let mut r = rng::stream(70, "fd", 0);
            reconstruction_loss(&[img.clone()], &prompt, &state, &b, &sched, &mut r)
                .unwrap()
                .value()
                .as_scalar()
        };

        let binding = AdapterBinding::trainable(&spec);
        let mut rg = rng::stream(70, "fd", 0);
        let loss =
            reconstruction_loss(&[img.clone()], &prompt, &state, &binding, &sched, &mut rg)
                .unwrap();
        let grads = loss.backward();
        let (down_var, _) = binding.tensors.get(&key).unwrap();
        let g = grads.get(down_var).expect("adapter gradient");

        let base = spec.entries[&key].down.clone();
        let h = 1e-5;
        let mut probe = rng::stream(71, "probe", 0);
        let mut seen_nonzero = false;
        for _ in 0..4 {
            let idx = probe.random_range(0..base.data().len());
            let mut plus = base.data().to_vec();
            let mut minus = plus.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (eval(&RawTensor::new(base.shape().to_vec(), plus))
                - eval(&RawTensor::new(base.shape().to_vec(), minus)))
                / (2.0 * h);
            let an = g.data()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "adapter entry {idx}: finite-difference {fd} vs analytic {an}"
            );
            seen_nonzero |= an.abs() > 1e-12;
        }
        assert!(seen_nonzero, "probed gradients were all zero");

        // Frozen denoiser weights receive no gradient at all.
        let params = state.leaves();
        for t in params.values() {
            assert!(grads.get(t).is_none());
        }
    }
}
