//! Frozen reward networks: an identity embedder scoring face crops and a
//! semantic scorer rating (frame, prompt) compatibility, plus the crop and
//! augmentation utilities feeding them.
//!
//! Two embedders are fitted from disjoint seed streams: the reward embedder
//! drives training losses, the evaluation twin is reserved for metrics so
//! that tuning cannot overfit its own judge. All parameters freeze after
//! fitting; every scoring path stays differentiable w.r.t. pixels.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use tinyvid_autodiff::{RawTensor, Tensor};

use crate::error::{Error, Result};
use crate::model::params_checksum;
use crate::optim::{AdamW, OptimConfig};
use crate::prompts::{GrammarConfig, PromptSpec, KEYWORD};
use crate::rng;
use crate::world::{self, BackgroundId, Corpus, Identity, MotionId, Rect};

/// Side length of the square patch every face crop is resized to.
pub const EMBED_INPUT: usize = 8;
/// Output dimension of the identity embedding.
pub const EMBED_DIM: usize = 16;
/// Penultimate feature width of the embedder (used for distribution metrics).
pub const FEAT_DIM: usize = 24 * 2 * 2;
/// Frame-encoder output width of the semantic scorer; matches the prompt
/// embedding width so a bilinear form can couple them.
pub const SCORE_DIM: usize = 16;

const SCORER_FLAT: usize = 16 * (world::FRAME_H / 4) * (world::FRAME_W / 4);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderRole {
    Reward,
    Eval,
}

impl EmbedderRole {
    fn label(self) -> &'static str {
        match self {
            EmbedderRole::Reward => "reward-embedder",
            EmbedderRole::Eval => "eval-embedder",
        }
    }
}

/// A face patch lifted into the autodiff graph, with its source geometry.
#[derive(Debug, Clone)]
pub struct FaceCrop {
    /// `[3, EMBED_INPUT, EMBED_INPUT]` in [0,1].
    pub patch: Tensor,
    pub source_box: Rect,
    pub augment_seed: Option<u64>,
}

/// Small convolutional identity embedder; frozen after fitting.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub params: BTreeMap<String, RawTensor>,
    pub role: EmbedderRole,
}

/// Bilinear (frame, prompt) compatibility scorer; frozen after fitting.
#[derive(Debug, Clone)]
pub struct SemanticScorer {
    pub params: BTreeMap<String, RawTensor>,
}

/// Exact sub-image of `frame` (`[H, W, 3]`) under a normalized box, as
/// channel-first `[3, bh, bw]` without any resampling.
pub fn crop_region(frame: &Tensor, source_box: &Rect) -> Result<Tensor> {
    source_box.validate()?;
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch(format!("frame {s:?}, expected [H,W,3]")));
    }
    let (y0, y1, x0, x1) = source_box.to_pixels(s[0], s[1]);
    Ok(frame.permute(&[2, 0, 1]).slice_hw(y0, y1, x0, x1))
}

/// Crop and bilinearly resize a face box to the embedder input size.
pub fn crop_face(frame: &Tensor, source_box: &Rect) -> Result<FaceCrop> {
    let patch = crop_region(frame, source_box)?.bilinear_resize(EMBED_INPUT, EMBED_INPUT);
    Ok(FaceCrop { patch, source_box: *source_box, augment_seed: None })
}

/// Knobs for crop augmentation; amplitudes scale with the strength argument.
#[derive(Debug, Clone, Copy)]
pub struct AugmentSpec {
    /// Per-channel multiplicative jitter amplitude (fraction of 1).
    pub scale_amp: f64,
    /// Per-channel additive jitter amplitude.
    pub shift_amp: f64,
    pub flip: bool,
    pub translate: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { scale_amp: 0.4, shift_amp: 0.2, flip: true, translate: true }
    }
}

impl AugmentSpec {
    /// Upper bound on the per-channel mean shift at a given strength: flips
    /// and cyclic translations permute pixels (mean-invariant), the affine
    /// jitter moves the mean by at most scale + shift, and clamping only
    /// pulls values back toward the original range.
    pub fn mean_shift_bound(&self, strength: f64) -> f64 {
        strength * (self.scale_amp + self.shift_amp)
    }
}

pub fn augment_crop(crop: &FaceCrop, strength: f64, seed: u64) -> Result<FaceCrop> {
    augment_crop_with(crop, &AugmentSpec::default(), strength, seed)
}

/// Seeded color jitter plus optional horizontal flip and cyclic translation.
/// Strength 0 returns the crop unchanged; outputs are clamped to [0,1].
/// Operates on pixel values only — the result enters the graph as a leaf.
pub fn augment_crop_with(
    crop: &FaceCrop,
    spec: &AugmentSpec,
    strength: f64,
    seed: u64,
) -> Result<FaceCrop> {
    if !(strength >= 0.0) {
        return Err(Error::invalid(format!("augmentation strength {strength}")));
    }
    if strength == 0.0 {
        return Ok(crop.clone());
    }
    let src = crop.patch.value();
    let s = src.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("crop patch {s:?}, expected [3,h,w]")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut r = rng::stream(seed, "augment", 0);
    let flip = spec.flip && r.random_bool(0.5);
    let (dy, dx) = if spec.translate {
        (r.random_range(-1..=1i64), r.random_range(-1..=1i64))
    } else {
        (0, 0)
    };
    let jitter: Vec<(f64, f64)> = (0..c)
        .map(|_| {
            let mul = 1.0 + r.random_range(-1.0..1.0) * spec.scale_amp * strength;
            let add = r.random_range(-1.0..1.0) * spec.shift_amp * strength;
            (mul, add)
        })
        .collect();

    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let (mul, add) = jitter[ch];
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let gx = if flip { w - 1 - x } else { x };
                let sx = (gx as i64 - dx).rem_euclid(w as i64) as usize;
                let v = src.data()[(ch * h + sy) * w + sx];
                out[(ch * h + y) * w + x] = (mul * v + add).clamp(0.0, 1.0);
            }
        }
    }
    Ok(FaceCrop {
        patch: Tensor::leaf(RawTensor::new(vec![c, h, w], out)),
        source_box: crop.source_box,
        augment_seed: Some(seed),
    })
}

fn leaf_params(params: &BTreeMap<String, RawTensor>) -> BTreeMap<String, Tensor> {
    params.iter().map(|(k, v)| (k.clone(), Tensor::leaf(v.clone()))).collect()
}

fn var_params(params: &BTreeMap<String, RawTensor>) -> BTreeMap<String, Tensor> {
    params.iter().map(|(k, v)| (k.clone(), Tensor::var(v.clone()))).collect()
}

/// Trunk of the identity embedder: `[3,8,8]` patch -> `[1, FEAT_DIM]`.
fn embedder_features(params: &BTreeMap<String, Tensor>, patch: &Tensor) -> Tensor {
    let x = patch.reshape(vec![1, 3, EMBED_INPUT, EMBED_INPUT]);
    let x = x.conv2d(&params["conv1.w"], 1).add_channel(&params["conv1.b"]).silu().avg_pool2d(2);
    let x = x.conv2d(&params["conv2.w"], 1).add_channel(&params["conv2.b"]).silu().avg_pool2d(2);
    x.reshape(vec![1, FEAT_DIM])
}

fn embedder_embed(params: &BTreeMap<String, Tensor>, patch: &Tensor) -> Tensor {
    embedder_features(params, patch)
        .matmul(&params["head.w"])
        .add_row(&params["head.b"])
        .reshape(vec![EMBED_DIM])
        .normalize_l2()
}

impl IdentityEmbedder {
    /// Unit-norm identity embedding of a crop; differentiable w.r.t. pixels.
    pub fn embed(&self, crop: &FaceCrop) -> Tensor {
        embedder_embed(&leaf_params(&self.params), &crop.patch)
    }

    /// Penultimate `[FEAT_DIM]` features, for distribution-level metrics.
    pub fn features(&self, crop: &FaceCrop) -> Tensor {
        embedder_features(&leaf_params(&self.params), &crop.patch).reshape(vec![FEAT_DIM])
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params)
    }
}

/// Unit-norm embedding of a crop — the reward-side entry point.
pub fn embed_identity(embedder: &IdentityEmbedder, crop: &FaceCrop) -> Tensor {
    embedder.embed(crop)
}

/// Frame half of the scorer: `[H,W,3]` -> `[1, SCORE_DIM]` encoding.
fn scorer_encode(params: &BTreeMap<String, Tensor>, frame: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch(format!("frame {s:?}, expected [H,W,3]")));
    }
    let x = frame
        .permute(&[2, 0, 1])
        .bilinear_resize(world::FRAME_H, world::FRAME_W)
        .reshape(vec![1, 3, world::FRAME_H, world::FRAME_W]);
    let x = x.conv2d(&params["conv1.w"], 1).add_channel(&params["conv1.b"]).silu().avg_pool2d(2);
    let x = x.conv2d(&params["conv2.w"], 1).add_channel(&params["conv2.b"]).silu().avg_pool2d(2);
    Ok(x.reshape(vec![1, SCORER_FLAT]).matmul(&params["enc.w"]).add_row(&params["enc.b"]))
}

/// Frame encoder + bilinear coupling against the prompt embedding.
fn scorer_score(
    params: &BTreeMap<String, Tensor>,
    frame: &Tensor,
    prompt_embedding: &[f64],
) -> Result<Tensor> {
    let f = scorer_encode(params, frame)?;
    if prompt_embedding.len() != SCORE_DIM {
        return Err(Error::ShapeMismatch(format!(
            "prompt embedding length {}, expected {SCORE_DIM}",
            prompt_embedding.len()
        )));
    }
    let e = Tensor::leaf(RawTensor::new(vec![SCORE_DIM, 1], prompt_embedding.to_vec()));
    let coupled = params["bilinear"].matmul(&e);
    Ok(f.matmul(&coupled).reshape(Vec::<usize>::new()))
}

impl SemanticScorer {
    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params)
    }
}

/// Scalar image-text compatibility; differentiable w.r.t. frame pixels.
pub fn score_semantic(scorer: &SemanticScorer, frame: &Tensor, prompt: &PromptSpec) -> Result<Tensor> {
    scorer_score(&leaf_params(&scorer.params), frame, &prompt.embedding)
}

#[derive(Debug, Clone)]
pub struct RewardModels {
    pub reward_embedder: IdentityEmbedder,
    pub eval_embedder: IdentityEmbedder,
    pub scorer: SemanticScorer,
}

/// Held-out quality measured right after fitting.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitReport {
    pub reward_same_id_cos: f64,
    pub reward_cross_id_cos: f64,
    pub eval_same_id_cos: f64,
    pub eval_cross_id_cos: f64,
    /// Fraction of held-out (frame, prompt) pairs where the matching prompt
    /// outscores a mismatched one.
    pub matched_beats_mismatched: f64,
}

#[derive(Debug, Clone)]
pub struct RewardFitConfig {
    pub embedder_iters: usize,
    pub scorer_iters: usize,
    pub augment_strength: f64,
    pub embedder_lr: f64,
    pub scorer_lr: f64,
}

impl Default for RewardFitConfig {
    fn default() -> Self {
        RewardFitConfig {
            embedder_iters: 240,
            scorer_iters: 900,
            augment_strength: 0.3,
            embedder_lr: 1e-2,
            scorer_lr: 1e-2,
        }
    }
}

fn init_conv(rng: &mut rand_chacha::ChaCha8Rng, co: usize, ci: usize) -> RawTensor {
    let std = (1.0 / (ci as f64 * 9.0)).sqrt();
    let data = (0..co * ci * 9)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    RawTensor::new(vec![co, ci, 3, 3], data)
}

fn init_linear(rng: &mut rand_chacha::ChaCha8Rng, d: usize, k: usize) -> RawTensor {
    let std = (1.0 / d as f64).sqrt();
    let data =
        (0..d * k).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect();
    RawTensor::new(vec![d, k], data)
}

fn init_embedder_params(seed: u64, label: &str) -> BTreeMap<String, RawTensor> {
    let mut r = rng::stream(seed, label, 0);
    BTreeMap::from([
        ("conv1.w".to_string(), init_conv(&mut r, 12, 3)),
        ("conv1.b".to_string(), RawTensor::zeros(vec![12])),
        ("conv2.w".to_string(), init_conv(&mut r, 24, 12)),
        ("conv2.b".to_string(), RawTensor::zeros(vec![24])),
        ("head.w".to_string(), init_linear(&mut r, FEAT_DIM, EMBED_DIM)),
        ("head.b".to_string(), RawTensor::zeros(vec![EMBED_DIM])),
    ])
}

fn init_scorer_params(seed: u64) -> BTreeMap<String, RawTensor> {
    let mut r = rng::stream(seed, "scorer", 0);
    BTreeMap::from([
        ("conv1.w".to_string(), init_conv(&mut r, 8, 3)),
        ("conv1.b".to_string(), RawTensor::zeros(vec![8])),
        ("conv2.w".to_string(), init_conv(&mut r, 16, 8)),
        ("conv2.b".to_string(), RawTensor::zeros(vec![16])),
        ("enc.w".to_string(), init_linear(&mut r, SCORER_FLAT, SCORE_DIM)),
        ("enc.b".to_string(), RawTensor::zeros(vec![SCORE_DIM])),
        ("bilinear".to_string(), init_linear(&mut r, SCORE_DIM, SCORE_DIM)),
    ])
}

/// Pull one augmented training crop for an identity class.
fn sample_class_crop(
    corpus: &Corpus,
    class_videos: &[usize],
    strength: f64,
    aug_seed: u64,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Result<FaceCrop> {
    let vid = &corpus.train_videos[*class_videos.choose(r).expect("class has videos")];
    let f = r.random_range(0..vid.face_boxes.len());
    let frame = Tensor::leaf(vid.frames.index_axis0(f));
    let crop = crop_face(&frame, &vid.face_boxes[f])?;
    augment_crop(&crop, strength, aug_seed)
}

fn fit_identity_embedder(
    corpus: &Corpus,
    role: EmbedderRole,
    seed: u64,
    cfg: &RewardFitConfig,
) -> Result<IdentityEmbedder> {
    let classes = corpus.train_identities.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, v) in corpus.train_videos.iter().enumerate() {
        let c = corpus
            .train_identities
            .iter()
            .position(|id| id.id_seed == v.identity.id_seed)
            .ok_or_else(|| Error::invalid("video identity missing from the training split"))?;
        by_class[c].push(i);
    }
    if by_class.iter().any(|v| v.is_empty()) {
        return Err(Error::invalid("every training identity needs at least one video"));
    }

    let mut params = init_embedder_params(seed, role.label());
    // Temporary classification head over the training identities.
    let mut r = rng::stream(seed, &format!("{}-cls", role.label()), 0);
    params.insert("cls.w".to_string(), init_linear(&mut r, EMBED_DIM, classes));
    params.insert("cls.b".to_string(), RawTensor::zeros(vec![classes]));

    let opt_cfg =
        OptimConfig { learning_rate: cfg.embedder_lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(opt_cfg)?;

    for it in 0..cfg.embedder_iters {
        let mut r = rng::stream(seed, &format!("{}-fit", role.label()), it as u64);
        let vars = var_params(&params);
        let mut loss: Option<Tensor> = None;
        for c in 0..classes {
            let aug_seed =
                rng::derive_seed(seed, &format!("{}-aug", role.label()), (it * classes + c) as u64);
            let crop =
                sample_class_crop(corpus, &by_class[c], cfg.augment_strength, aug_seed, &mut r)?;
            let emb = embedder_embed(&vars, &crop.patch).reshape(vec![1, EMBED_DIM]);
            let probs = emb.matmul(&vars["cls.w"]).add_row(&vars["cls.b"]).softmax_last();
            let mut onehot = vec![0.0; classes];
            onehot[c] = 1.0;
            let picked = probs.mul(&Tensor::leaf(RawTensor::new(vec![1, classes], onehot)));
            let nll = picked.sum().ln().affine(-1.0, 0.0);
            loss = Some(match loss {
                Some(l) => l.add(&nll),
                None => nll,
            });
        }
        let loss = loss.expect("at least one class").affine(1.0 / classes as f64, 0.0);
        let grads = loss.backward();
        let mut grad_map = BTreeMap::new();
        for (name, t) in &vars {
            grad_map.insert(name.clone(), grads.get_or_zeros(t));
        }
        opt.step(&mut params, &grad_map)?;
    }

    params.remove("cls.w");
    params.remove("cls.b");
    Ok(IdentityEmbedder { params, role })
}

/// A (motion, background) pair different from the video's own, for
/// mismatched-prompt construction.
fn other_combo(
    motion: MotionId,
    background: BackgroundId,
    r: &mut rand_chacha::ChaCha8Rng,
) -> (MotionId, BackgroundId) {
    loop {
        let m = *MotionId::all().choose(r).expect("nonempty");
        let b = *BackgroundId::all().choose(r).expect("nonempty");
        if m != motion || b != background {
            return (m, b);
        }
    }
}

fn fit_semantic_scorer(
    corpus: &Corpus,
    seed: u64,
    cfg: &RewardFitConfig,
) -> Result<SemanticScorer> {
    let mut params = init_scorer_params(seed);
    let opt_cfg =
        OptimConfig { learning_rate: cfg.scorer_lr, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(opt_cfg)?;
    let modifiers = GrammarConfig::default().modifiers;

    for it in 0..cfg.scorer_iters {
        let mut r = rng::stream(seed, "scorer-fit", it as u64);
        let vid = corpus.train_videos[r.random_range(0..corpus.train_videos.len())].clone();
        let f = r.random_range(0..vid.face_boxes.len());
        let frame = Tensor::leaf(vid.frames.index_axis0(f));
        // Randomize subject and modifier so scoring keys on motion and
        // background words rather than the particular subject token.
        let subject = if r.random_bool(0.5) {
            vid.identity.subject_token()
        } else {
            KEYWORD.to_string()
        };
        let modifier = modifiers.choose(&mut r).cloned().unwrap_or_default();
        // Cross-entropy over every motion x background combination for this
        // frame. Normalizing across prompts per frame removes any per-prompt
        // score offset, which a pairwise loss would leave uncalibrated.
        let mut embeddings = Vec::new();
        let mut truth = None;
        for (mi, m) in MotionId::all().into_iter().enumerate() {
            for (bi, b) in BackgroundId::all().into_iter().enumerate() {
                if (m, b) == (vid.motion_id, vid.background_id) {
                    truth = Some(mi * BackgroundId::all().len() + bi);
                }
                embeddings.extend(PromptSpec::new(&subject, &modifier, m, b).embedding);
            }
        }
        let truth = truth.expect("video combo is in the grid");
        let combos = embeddings.len() / SCORE_DIM;
        // [SCORE_DIM, combos] so scores come out as a row per frame.
        let e_t = Tensor::leaf(
            RawTensor::new(vec![combos, SCORE_DIM], embeddings).permute(&[1, 0]),
        );

        let vars = var_params(&params);
        let scores = scorer_encode(&vars, &frame)?.matmul(&vars["bilinear"]).matmul(&e_t);
        let probs = scores.softmax_last();
        let mut onehot = vec![0.0; combos];
        onehot[truth] = 1.0;
        let picked = probs.mul(&Tensor::leaf(RawTensor::new(vec![1, combos], onehot)));
        let loss = picked.sum().ln().affine(-1.0, 0.0);
        let grads = loss.backward();
        let mut grad_map = BTreeMap::new();
        for (name, t) in &vars {
            grad_map.insert(name.clone(), grads.get_or_zeros(t));
        }
        opt.step(&mut params, &grad_map)?;
    }
    Ok(SemanticScorer { params })
}

/// Render short probe videos for an identity the fit never saw.
fn heldout_probe_videos(identity: &Identity, seed: u64) -> Result<Vec<world::SceneVideo>> {
    let motions = MotionId::all();
    let backgrounds = BackgroundId::all();
    let mut vids = Vec::new();
    for g in 0..4 {
        let vseed = rng::derive_seed(seed, "heldout-probe", identity.id_seed ^ g as u64);
        vids.push(world::make_video(
            identity,
            motions[g % motions.len()],
            backgrounds[(g + 1) % backgrounds.len()],
            8,
            vseed,
        )?);
    }
    Ok(vids)
}

fn probe_crops(videos: &[world::SceneVideo]) -> Result<Vec<FaceCrop>> {
    let mut crops = Vec::new();
    for v in videos {
        for f in [0, v.face_boxes.len() / 2] {
            let frame = Tensor::leaf(v.frames.index_axis0(f));
            crops.push(crop_face(&frame, &v.face_boxes[f])?);
        }
    }
    Ok(crops)
}

fn cos(a: &RawTensor, b: &RawTensor) -> f64 {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum()
}

fn embedding_separation(
    embedder: &IdentityEmbedder,
    crops_by_identity: &[Vec<FaceCrop>],
) -> (f64, f64) {
    let embs: Vec<Vec<RawTensor>> = crops_by_identity
        .iter()
        .map(|crops| crops.iter().map(|c| embedder.embed(c).value().clone()).collect())
        .collect();
    let (mut same, mut same_n) = (0.0, 0usize);
    let (mut cross, mut cross_n) = (0.0, 0usize);
    for (i, ei) in embs.iter().enumerate() {
        for (a, ea) in ei.iter().enumerate() {
            for eb in ei.iter().skip(a + 1) {
                same += cos(ea, eb);
                same_n += 1;
            }
            for ej in embs.iter().skip(i + 1) {
                for eb in ej {
                    cross += cos(ea, eb);
                    cross_n += 1;
                }
            }
        }
    }
    (same / same_n.max(1) as f64, cross / cross_n.max(1) as f64)
}

pub fn fit_reward_models(corpus: &Corpus, seed: u64) -> Result<(RewardModels, FitReport)> {
    fit_reward_models_with(corpus, seed, &RewardFitConfig::default())
}

pub fn fit_reward_models_with(
    corpus: &Corpus,
    seed: u64,
    cfg: &RewardFitConfig,
) -> Result<(RewardModels, FitReport)> {
    if corpus.train_identities.len() < 2 {
        return Err(Error::invalid("reward fitting needs at least 2 training identities"));
    }
    let reward_embedder = fit_identity_embedder(corpus, EmbedderRole::Reward, seed, cfg)?;
    let eval_embedder = fit_identity_embedder(corpus, EmbedderRole::Eval, seed, cfg)?;
    let scorer = fit_semantic_scorer(corpus, seed, cfg)?;

    // Held-out probes; with a single held-out identity, borrow one training
    // identity so cross-identity pairs exist.
    let mut probe_ids: Vec<Identity> = corpus.heldout_identities.clone();
    if probe_ids.len() < 2 {
        probe_ids.push(corpus.train_identities[0].clone());
    }
    let mut crops_by_identity = Vec::new();
    let mut probe_videos = Vec::new();
    for id in &probe_ids {
        let vids = heldout_probe_videos(id, seed)?;
        crops_by_identity.push(probe_crops(&vids)?);
        probe_videos.extend(vids);
    }
    let (reward_same, reward_cross) = embedding_separation(&reward_embedder, &crops_by_identity);
    let (eval_same, eval_cross) = embedding_separation(&eval_embedder, &crops_by_identity);

    // Motion is read off a single frame through the sprite's trajectory
    // position, so pair probes use mid-trajectory frames; at frame 0 every
    // orbit coincides with the static pose and no scorer could tell them
    // apart.
    let mut wins = 0usize;
    let mut total = 0usize;
    for (i, v) in probe_videos.iter().enumerate() {
        let mut r = rng::stream(seed, "fit-report-pairs", i as u64);
        let f_count = v.face_boxes.len();
        for f in [f_count / 4, f_count / 2, 3 * f_count / 4] {
            let frame = Tensor::leaf(v.frames.index_axis0(f));
            let matched = PromptSpec::new(KEYWORD, "", v.motion_id, v.background_id);
            let (m2, b2) = other_combo(v.motion_id, v.background_id, &mut r);
            let mismatched = PromptSpec::new(KEYWORD, "", m2, b2);
            let s_m = score_semantic(&scorer, &frame, &matched)?.value().data()[0];
            let s_x = score_semantic(&scorer, &frame, &mismatched)?.value().data()[0];
            if s_m > s_x {
                wins += 1;
            }
            total += 1;
        }
    }

    let report = FitReport {
        reward_same_id_cos: reward_same,
        reward_cross_id_cos: reward_cross,
        eval_same_id_cos: eval_same,
        eval_cross_id_cos: eval_cross,
        matched_beats_mismatched: wins as f64 / total.max(1) as f64,
    };
    Ok((RewardModels { reward_embedder, eval_embedder, scorer }, report))
}
