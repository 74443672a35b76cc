//! Generation-quality metrics and the comparison report.
//!
//! Five numbers summarize a run: identity similarity of face crops against
//! the references (measured with the held-out evaluation embedder, never the
//! one that supplied training gradients), pixel-level motion, embedding-level
//! temporal smoothness, prompt alignment under the semantic scorer, and a
//! Fréchet distance between Gaussian fits of frame features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::rewards::{
    crop_face, score_semantic, EmbedderRole, IdentityEmbedder, RewardModels, SemanticScorer,
};
use crate::world::{canonical_box, Rect, SceneVideo};

/// Mean absolute adjacent-frame difference is scaled by this constant so toy
/// motion scores land in a readable 0-100ish range.
pub const DYNAMIC_SCALE: f64 = 100.0;

/// Ridge added to each covariance before the matrix square root.
pub const COV_REG: f64 = 1e-6;

/// One video as the metrics see it: pixels plus per-frame face boxes and the
/// prompt that produced it.
#[derive(Debug, Clone)]
pub struct EvalVideo {
    /// `[F, H, W, 3]` in [0,1].
    pub frames: RawTensor,
    pub face_boxes: Vec<Rect>,
    pub prompt: PromptSpec,
}

impl EvalVideo {
    pub fn from_scene(scene: &SceneVideo) -> Self {
        EvalVideo {
            frames: scene.frames.clone(),
            face_boxes: scene.face_boxes.clone(),
            prompt: scene.prompt.clone(),
        }
    }

    /// Wrap sampler output. The face boxes are the synthetic world's
    /// analytic sprite positions for the prompt's motion.
    pub fn from_generated(frames: RawTensor, prompt: PromptSpec) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "video must be [F, H, W, 3], got {s:?}"
            )));
        }
        let f = s[0];
        let face_boxes = (0..f).map(|i| canonical_box(prompt.motion_id, i, f)).collect();
        Ok(EvalVideo { frames, face_boxes, prompt })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    fn frame(&self, i: usize) -> Tensor {
        Tensor::leaf(self.frames.index_axis0(i))
    }
}

/// Metric row for one labeled run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_label: String,
    pub face_sim: f64,
    pub dynamic_degree: f64,
    pub frechet: f64,
    pub temporal_consistency: f64,
    pub text_alignment: f64,
    pub n_videos: usize,
}

fn require_eval_role(embedder: &IdentityEmbedder) -> Result<()> {
    if embedder.role != EmbedderRole::Eval {
        return Err(Error::invalid(
            "metrics must use the held-out evaluation embedder, not the reward embedder",
        ));
    }
    Ok(())
}

fn whole_frame() -> Rect {
    Rect { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }
}

fn embed_crop(embedder: &IdentityEmbedder, frame: &Tensor, b: &Rect) -> Result<RawTensor> {
    Ok(embedder.embed(&crop_face(frame, b)?).value().clone())
}

fn dot(a: &RawTensor, b: &RawTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Mean over videos and frames of the best cosine between the frame's face
/// crop and any reference embedding. References are `(image, face box)`
/// pairs as produced by the synthetic world.
pub fn face_similarity(
    videos: &[EvalVideo],
    refs: &[(RawTensor, Rect)],
    eval_embedder: &IdentityEmbedder,
) -> Result<f64> {
    require_eval_role(eval_embedder)?;
    if refs.is_empty() {
        return Err(Error::invalid("face similarity needs at least one reference"));
    }
    if videos.is_empty() {
        return Err(Error::invalid("face similarity needs at least one video"));
    }
    let ref_embeds: Vec<RawTensor> = refs
        .iter()
        .map(|(img, b)| embed_crop(eval_embedder, &Tensor::leaf(img.clone()), b))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut n = 0usize;
    for v in videos {
        if v.face_boxes.len() != v.frame_count() {
            return Err(Error::invalid("one face box per frame required"));
        }
        for i in 0..v.frame_count() {
            let e = embed_crop(eval_embedder, &v.frame(i), &v.face_boxes[i])?;
            let best = ref_embeds.iter().map(|r| dot(&e, r)).fold(f64::NEG_INFINITY, f64::max);
            total += best;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Motion proxy: mean absolute pixel change between adjacent frames, scaled
/// by [`DYNAMIC_SCALE`]. Zero exactly for a static clip.
pub fn dynamic_degree(frames: &RawTensor) -> Result<f64> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::ShapeMismatch(format!("video must be [F, H, W, 3], got {s:?}")));
    }
    let f = s[0];
    if f < 2 {
        return Err(Error::invalid("dynamic degree needs at least 2 frames"));
    }
    let per_frame = s[1] * s[2] * s[3];
    let d = frames.data();
    let mut total = 0.0;
    for i in 0..f - 1 {
        let (a, b) = (&d[i * per_frame..(i + 1) * per_frame], &d[(i + 1) * per_frame..(i + 2) * per_frame]);
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / per_frame as f64;
    }
    Ok(DYNAMIC_SCALE * total / (f - 1) as f64)
}

/// Smoothness proxy: mean cosine between whole-frame embeddings of adjacent
/// frames. Identical frames give exactly 1.
pub fn temporal_consistency(frames: &RawTensor, eval_embedder: &IdentityEmbedder) -> Result<f64> {
    require_eval_role(eval_embedder)?;
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::ShapeMismatch(format!("video must be [F, H, W, 3], got {s:?}")));
    }
    let f = s[0];
    if f < 2 {
        return Err(Error::invalid("temporal consistency needs at least 2 frames"));
    }
    let b = whole_frame();
    let embeds: Vec<RawTensor> = (0..f)
        .map(|i| embed_crop(eval_embedder, &Tensor::leaf(frames.index_axis0(i)), &b))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..f - 1 {
        total += dot(&embeds[i], &embeds[i + 1]);
    }
    Ok(total / (f - 1) as f64)
}

/// Prompt alignment: mean semantic score of every frame against its video's
/// assigned prompt. The prompt list is explicit so mismatched pairings can
/// be scored deliberately (shuffled-prompt controls).
pub fn text_alignment(
    videos: &[EvalVideo],
    prompts: &[PromptSpec],
    scorer: &SemanticScorer,
) -> Result<f64> {
    if videos.len() != prompts.len() {
        return Err(Error::invalid(format!(
            "got {} videos but {} prompts",
            videos.len(),
            prompts.len()
        )));
    }
    if videos.is_empty() {
        return Err(Error::invalid("text alignment needs at least one video"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (v, p) in videos.iter().zip(prompts) {
        for i in 0..v.frame_count() {
            total += score_semantic(scorer, &v.frame(i), p)?.value().as_scalar();
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Penultimate-layer feature vectors of every frame, for Fréchet fits.
pub fn video_features(videos: &[EvalVideo], eval_embedder: &IdentityEmbedder) -> Result<Vec<RawTensor>> {
    require_eval_role(eval_embedder)?;
    let b = whole_frame();
    let mut out = Vec::new();
    for v in videos {
        for i in 0..v.frame_count() {
            let crop = crop_face(&v.frame(i), &b)?;
            out.push(eval_embedder.features(&crop).value().clone());
        }
    }
    Ok(out)
}

fn mean_and_cov(set: &[RawTensor], d: usize, full: bool) -> (Vec<f64>, Vec<f64>) {
    let n = set.len();
    let mut mean = vec![0.0; d];
    for x in set {
        for (m, v) in mean.iter_mut().zip(x.data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Sample covariance (n-1 denominator); a singleton set contributes zero.
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    if full {
        let mut cov = vec![0.0; d * d];
        for x in set {
            let c: Vec<f64> = x.data().iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        for v in &mut cov {
            *v /= denom;
        }
        for i in 0..d {
            cov[i * d + i] += COV_REG;
        }
        (mean, cov)
    } else {
        let mut var = vec![0.0; d];
        for x in set {
            for ((v, m), acc) in x.data().iter().zip(&mean).zip(&mut var) {
                *acc += (v - m) * (v - m);
            }
        }
        for v in &mut var {
            *v = *v / denom + COV_REG;
        }
        (mean, var)
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues materially
/// below zero mean the input was not a covariance.
fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.diagonal().amax().max(1.0);
    let eig = m.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::NumericSingularity(format!(
                "covariance eigenvalue {v} is negative beyond tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let lam = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * lam * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// Full covariances require at least D+1 samples on both sides; otherwise
/// both sides drop to diagonal covariances so the comparison stays
/// like-for-like. Each covariance gets a `COV_REG` ridge, applied before
/// every appearance in the formula so identical sets score exactly zero.
pub fn frechet_distance(a: &[RawTensor], b: &[RawTensor]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("both feature sets must be nonempty"));
    }
    let d = a[0].shape()[0];
    for x in a.iter().chain(b) {
        if x.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "feature vectors must share shape [{d}], got {:?}",
                x.shape()
            )));
        }
    }
    let full = a.len() > d && b.len() > d;
    let (mu_a, cov_a) = mean_and_cov(a, d, full);
    let (mu_b, cov_b) = mean_and_cov(b, d, full);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();

    let trace_term = if full {
        let sa = DMatrix::from_row_slice(d, d, &cov_a);
        let sb = DMatrix::from_row_slice(d, d, &cov_b);
        let root_a = psd_sqrt(sa.clone())?;
        let mut inner = &root_a * &sb * &root_a;
        // Symmetrize against round-off before the second root.
        inner = (&inner + inner.transpose()) * 0.5;
        let cross = psd_sqrt(inner)?;
        sa.trace() + sb.trace() - 2.0 * cross.trace()
    } else {
        cov_a
            .iter()
            .zip(&cov_b)
            .map(|(x, y)| x + y - 2.0 * (x * y).sqrt())
            .sum()
    };
    let dist = mean_term + trace_term;
    if !dist.is_finite() {
        return Err(Error::NonFinite("Fréchet distance".into()));
    }
    // Exact-zero distances can land a hair below zero in floating point.
    Ok(dist.max(0.0))
}

/// Everything needed to score one run against shared references.
#[derive(Debug)]
pub struct RunSpec<'a> {
    pub label: String,
    pub videos: &'a [EvalVideo],
    pub refs: &'a [(RawTensor, Rect)],
}

/// Compute the full metric row for one run. The Fréchet term compares the
/// run's frame features against those of `reference_videos` (typically the
/// training corpus clips).
pub fn evaluate_run(
    run: &RunSpec,
    reference_videos: &[EvalVideo],
    models: &RewardModels,
) -> Result<MetricsReport> {
    let prompts: Vec<PromptSpec> = run.videos.iter().map(|v| v.prompt.clone()).collect();
    let mut dynamic = 0.0;
    let mut temporal = 0.0;
    for v in run.videos {
        dynamic += dynamic_degree(&v.frames)?;
        temporal += temporal_consistency(&v.frames, &models.eval_embedder)?;
    }
    let n = run.videos.len().max(1) as f64;
    let gen_features = video_features(run.videos, &models.eval_embedder)?;
    let ref_features = video_features(reference_videos, &models.eval_embedder)?;
    Ok(MetricsReport {
        run_label: run.label.clone(),
        face_sim: face_similarity(run.videos, run.refs, &models.eval_embedder)?,
        dynamic_degree: dynamic / n,
        frechet: frechet_distance(&gen_features, &ref_features)?,
        temporal_consistency: temporal / n,
        text_alignment: text_alignment(run.videos, &prompts, &models.scorer)?,
        n_videos: run.videos.len(),
    })
}

/// Column order for emitted tables.
pub const REPORT_HEADER: &str =
    "run,face_sim,dynamic_degree,frechet,temporal_consistency,text_alignment,n_videos";

/// Evaluate several runs and render a comma-separated table, one row per run.
pub fn report(
    runs: &[RunSpec],
    reference_videos: &[EvalVideo],
    models: &RewardModels,
) -> Result<(Vec<MetricsReport>, String)> {
    let mut rows = Vec::with_capacity(runs.len());
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for run in runs {
        let row = evaluate_run(run, reference_videos, models)?;
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            row.run_label,
            row.face_sim,
            row.dynamic_degree,
            row.frechet,
            row.temporal_consistency,
            row.text_alignment,
            row.n_videos
        ));
        rows.push(row);
    }
    Ok((rows, text))
}
