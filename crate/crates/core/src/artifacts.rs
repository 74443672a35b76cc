//! Versioned on-disk artifacts: a binary tensor container plus the
//! checkpoint, corpus-directory, prompt-pool, and run-directory formats
//! built on top of it.
//!
//! Container layout (magic `TVTC`, version 1), all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic b"TVTC"
//! bytes 4..8    container format version, u32
//! bytes 8..16   JSON header length in bytes, u64
//! header        UTF-8 JSON {kind, version, meta, entries: [{name, shape}]}
//! payload       per entry, in header order: shape-product f64 values
//! ```
//!
//! `meta` is an artifact-specific JSON object (model configuration, seeds,
//! fit reports, ...), so every file describes itself without side lookups.
//! Values round-trip bitwise: payloads are raw IEEE-754 doubles, never text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tinyvid_autodiff::RawTensor;

use crate::adapter::{AdapterParams, LowRankPair};
use crate::error::{Error, Result};
use crate::model::{AttnKind, DenoiserState, ModelConfig};
use crate::objectives::LossBreakdown;
use crate::optim::{AdamW, OptimState};
use crate::prompts::{PromptPool, PromptSpec};
use crate::rewards::{EmbedderRole, FitReport, IdentityEmbedder, RewardModels, SemanticScorer};
use crate::schedule::ScheduleKind;
use crate::text;
use crate::trainer::{TrainConfig, TrainState};
use crate::world::{BackgroundId, Corpus, Identity, MotionId, Rect, SceneVideo};

pub const CONTAINER_MAGIC: &[u8; 4] = b"TVTC";
pub const CONTAINER_VERSION: u32 = 1;
/// Upper bound on the JSON header, to reject garbage length fields early.
const MAX_HEADER_BYTES: u64 = 64 << 20;

pub const KIND_DENOISER: &str = "denoiser";
pub const KIND_ADAPTER: &str = "adapter";
pub const KIND_CHECKPOINT: &str = "train-checkpoint";
pub const KIND_REWARDS: &str = "reward-models";
pub const KIND_FRAMES: &str = "video-frames";

pub const CORPUS_FORMAT: &str = "corpus-dir";
pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FRAMES_DIR: &str = "frames";

pub const RUN_FORMAT: &str = "run-dir";
pub const RUN_VERSION: u32 = 1;
pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const ADAPTER_FILE: &str = "adapter.tvt";
pub const DENOISER_FILE: &str = "denoiser.tvt";
pub const MERGED_FILE: &str = "merged.tvt";
pub const REWARDS_FILE: &str = "rewards.tvt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const POOL_TEXT_FILE: &str = "prompts.txt";
pub const POOL_SIDECAR_FILE: &str = "prompts.json";

/// One tensor file: a kind tag, free-form JSON metadata, and named arrays.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, RawTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

pub fn write_container(path: impl AsRef<Path>, container: &Container) -> Result<()> {
    let entries = container
        .tensors
        .iter()
        .map(|(name, t)| EntryHeader { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let header = ContainerHeader {
        kind: container.kind.clone(),
        version: CONTAINER_VERSION,
        meta: container.meta.clone(),
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for tensor in container.tensors.values() {
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("{}: not a tensor container", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "{}: container version {version}, this build reads {CONTAINER_VERSION}",
            path.display()
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()?;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!(
            "{}: header length {header_len} exceeds the {MAX_HEADER_BYTES}-byte cap",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes)?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)?;
    let mut tensors = BTreeMap::new();
    for entry in &header.entries {
        let len: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let tensor = RawTensor::new(entry.shape.clone(), data);
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate entry {:?}",
                path.display(),
                entry.name
            )));
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok(Container { kind: header.kind, meta: header.meta, tensors })
}

fn expect_kind(container: &Container, kind: &str, path: &Path) -> Result<()> {
    if container.kind != kind {
        return Err(Error::Format(format!(
            "{}: holds a {:?} artifact, expected {:?}",
            path.display(),
            container.kind,
            kind
        )));
    }
    Ok(())
}

fn meta_of<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

fn meta_as<T: DeserializeOwned>(meta: &serde_json::Value, path: &Path) -> Result<T> {
    serde_json::from_value(meta.clone())
        .map_err(|e| Error::Format(format!("{}: bad metadata: {e}", path.display())))
}

/// Copy entries under `prefix` out of `map`, with the prefix stripped.
fn split_prefix(map: &BTreeMap<String, RawTensor>, prefix: &str) -> BTreeMap<String, RawTensor> {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

fn merge_prefix(
    dst: &mut BTreeMap<String, RawTensor>,
    prefix: &str,
    src: &BTreeMap<String, RawTensor>,
) {
    for (k, v) in src {
        dst.insert(format!("{prefix}{k}"), v.clone());
    }
}

// ---------------------------------------------------------------------------
// JSON files and structured logs
// ---------------------------------------------------------------------------

/// Pretty-printed JSON with a trailing newline; creates or truncates.
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// One line of the per-step loss log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Number successful steps consecutively from `start_step`. Aborted steps
/// leave no history entry, so callers log the surviving records only.
pub fn loss_records(history: &[LossBreakdown], start_step: usize) -> Vec<LossRecord> {
    history
        .iter()
        .enumerate()
        .map(|(i, loss)| LossRecord { step: start_step + i, loss: loss.clone() })
        .collect()
}

/// Append records to a JSON-lines log, creating the file on first use.
pub fn append_loss_records(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record)?;
        buf.push(b'\n');
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_loss_records(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut records = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Model, adapter, and optimizer checkpoints
// ---------------------------------------------------------------------------

/// Self-description stored with a frozen denoiser checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserManifest {
    pub config: ModelConfig,
    pub schedule: ScheduleKind,
    pub sampler_steps: usize,
    pub seed: u64,
    pub pretrain_iterations: usize,
}

pub fn save_denoiser(
    path: impl AsRef<Path>,
    state: &DenoiserState,
    manifest: &DenoiserManifest,
) -> Result<()> {
    if manifest.config != state.config {
        return Err(Error::invalid("manifest configuration disagrees with the denoiser state"));
    }
    let container = Container {
        kind: KIND_DENOISER.to_string(),
        meta: meta_of(manifest)?,
        tensors: state.params.clone(),
    };
    write_container(path, &container)
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<(DenoiserState, DenoiserManifest)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    expect_kind(&container, KIND_DENOISER, path)?;
    let manifest: DenoiserManifest = meta_as(&container.meta, path)?;
    // A throwaway init provides the expected parameter names and shapes.
    let template = DenoiserState::init_random(manifest.config.clone(), 0)?;
    if container.tensors.len() != template.params.len() {
        return Err(Error::Format(format!(
            "{}: {} parameters, the configuration implies {}",
            path.display(),
            container.tensors.len(),
            template.params.len()
        )));
    }
    for (name, expected) in &template.params {
        let got = container.tensors.get(name).ok_or_else(|| {
            Error::Format(format!("{}: missing parameter {name:?}", path.display()))
        })?;
        if got.shape() != expected.shape() {
            return Err(Error::Format(format!(
                "{}: parameter {name:?} has shape {:?}, expected {:?}",
                path.display(),
                got.shape(),
                expected.shape()
            )));
        }
    }
    let state = DenoiserState { config: manifest.config.clone(), params: container.tensors };
    Ok((state, manifest))
}

/// Self-description stored with an adapter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub rank: usize,
    pub gate_fraction: f64,
    pub target_kinds: BTreeSet<AttnKind>,
    /// Optimization step the adapter was saved at.
    pub step: usize,
}

impl AdapterManifest {
    pub fn of(adapter: &AdapterParams, step: usize) -> Self {
        AdapterManifest {
            rank: adapter.rank,
            gate_fraction: adapter.gate_fraction,
            target_kinds: adapter.target_kinds.clone(),
            step,
        }
    }
}

fn adapter_from_parts(
    map: &BTreeMap<String, RawTensor>,
    manifest: &AdapterManifest,
    path: &Path,
) -> Result<AdapterParams> {
    if !(manifest.gate_fraction > 0.0 && manifest.gate_fraction <= 1.0) {
        return Err(Error::Format(format!(
            "{}: gate fraction {} outside (0, 1]",
            path.display(),
            manifest.gate_fraction
        )));
    }
    let mut layers = BTreeSet::new();
    for name in map.keys() {
        let layer = name
            .strip_suffix(".down")
            .or_else(|| name.strip_suffix(".up"))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: adapter entry {name:?} lacks a .down/.up suffix",
                    path.display()
                ))
            })?;
        layers.insert(layer.to_string());
    }
    let mut entries = BTreeMap::new();
    for layer in layers {
        let down = map.get(&format!("{layer}.down")).ok_or_else(|| {
            Error::Format(format!("{}: layer {layer:?} lacks its down factor", path.display()))
        })?;
        let up = map.get(&format!("{layer}.up")).ok_or_else(|| {
            Error::Format(format!("{}: layer {layer:?} lacks its up factor", path.display()))
        })?;
        let ok = down.shape().len() == 2
            && up.shape().len() == 2
            && down.shape()[1] == manifest.rank
            && up.shape()[0] == manifest.rank;
        if !ok {
            return Err(Error::Format(format!(
                "{}: layer {layer:?} factors {:?} x {:?} do not match rank {}",
                path.display(),
                down.shape(),
                up.shape(),
                manifest.rank
            )));
        }
        entries.insert(layer, LowRankPair { down: down.clone(), up: up.clone() });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("{}: adapter has no layers", path.display())));
    }
    Ok(AdapterParams {
        entries,
        rank: manifest.rank,
        gate_fraction: manifest.gate_fraction,
        target_kinds: manifest.target_kinds.clone(),
    })
}

pub fn save_adapter(path: impl AsRef<Path>, adapter: &AdapterParams, step: usize) -> Result<()> {
    let container = Container {
        kind: KIND_ADAPTER.to_string(),
        meta: meta_of(&AdapterManifest::of(adapter, step))?,
        tensors: adapter.to_param_map(),
    };
    write_container(path, &container)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<(AdapterParams, AdapterManifest)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    expect_kind(&container, KIND_ADAPTER, path)?;
    let manifest: AdapterManifest = meta_as(&container.meta, path)?;
    let adapter = adapter_from_parts(&container.tensors, &manifest, path)?;
    Ok((adapter, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: TrainConfig,
    adapter: AdapterManifest,
    consecutive_aborts: usize,
    history: Vec<LossBreakdown>,
    optim_step_count: u64,
}

/// Full training snapshot: adapter, optimizer moments, counters, history,
/// and the resolved configuration, sufficient to resume bit-exactly.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &TrainState,
    config: &TrainConfig,
) -> Result<()> {
    let manifest = CheckpointManifest {
        config: config.clone(),
        adapter: AdapterManifest::of(&state.adapter, state.step),
        consecutive_aborts: state.consecutive_aborts,
        history: state.history.clone(),
        optim_step_count: state.optimizer.state().step_count,
    };
    let mut tensors = BTreeMap::new();
    merge_prefix(&mut tensors, "adapter.", &state.adapter.to_param_map());
    merge_prefix(&mut tensors, "moment1.", &state.optimizer.state().first_moment);
    merge_prefix(&mut tensors, "moment2.", &state.optimizer.state().second_moment);
    let container =
        Container { kind: KIND_CHECKPOINT.to_string(), meta: meta_of(&manifest)?, tensors };
    write_container(path, &container)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    expect_kind(&container, KIND_CHECKPOINT, path)?;
    let manifest: CheckpointManifest = meta_as(&container.meta, path)?;
    let adapter =
        adapter_from_parts(&split_prefix(&container.tensors, "adapter."), &manifest.adapter, path)?;
    let optim_state = OptimState {
        first_moment: split_prefix(&container.tensors, "moment1."),
        second_moment: split_prefix(&container.tensors, "moment2."),
        step_count: manifest.optim_step_count,
    };
    let optimizer = AdamW::restore(manifest.config.optim.clone(), optim_state)?;
    let state = TrainState {
        adapter,
        optimizer,
        step: manifest.adapter.step,
        history: manifest.history,
        consecutive_aborts: manifest.consecutive_aborts,
    };
    Ok((state, manifest.config))
}

/// Self-description stored with fitted reward/evaluation models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardsManifest {
    pub seed: u64,
    pub report: FitReport,
}

pub fn save_reward_models(
    path: impl AsRef<Path>,
    models: &RewardModels,
    manifest: &RewardsManifest,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    merge_prefix(&mut tensors, "reward.", &models.reward_embedder.params);
    merge_prefix(&mut tensors, "eval.", &models.eval_embedder.params);
    merge_prefix(&mut tensors, "scorer.", &models.scorer.params);
    let container =
        Container { kind: KIND_REWARDS.to_string(), meta: meta_of(manifest)?, tensors };
    write_container(path, &container)
}

pub fn load_reward_models(path: impl AsRef<Path>) -> Result<(RewardModels, RewardsManifest)> {
    let path = path.as_ref();
    let container = read_container(path)?;
    expect_kind(&container, KIND_REWARDS, path)?;
    let manifest: RewardsManifest = meta_as(&container.meta, path)?;
    let reward = split_prefix(&container.tensors, "reward.");
    let eval = split_prefix(&container.tensors, "eval.");
    let scorer = split_prefix(&container.tensors, "scorer.");
    if reward.is_empty() || eval.is_empty() || scorer.is_empty() {
        return Err(Error::Format(format!(
            "{}: expected reward.*, eval.*, and scorer.* parameter groups",
            path.display()
        )));
    }
    let models = RewardModels {
        reward_embedder: IdentityEmbedder { params: reward, role: EmbedderRole::Reward },
        eval_embedder: IdentityEmbedder { params: eval, role: EmbedderRole::Eval },
        scorer: SemanticScorer { params: scorer },
    };
    Ok((models, manifest))
}

// ---------------------------------------------------------------------------
// Corpus directories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusVideoEntry {
    pub identity_index: usize,
    pub motion_id: MotionId,
    pub background_id: BackgroundId,
    pub prompt: PromptSpec,
    pub face_boxes: Vec<Rect>,
    /// Path of the frame container, relative to the corpus directory.
    pub frames_file: String,
    /// Frame tensor shape `[F, H, W, 3]`.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_videos_per_identity: usize,
    pub train_identities: Vec<Identity>,
    pub heldout_identities: Vec<Identity>,
    pub videos: Vec<CorpusVideoEntry>,
}

/// Write a corpus as a directory: `manifest.json` plus one frame container
/// per video under `frames/`.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(CORPUS_FRAMES_DIR))?;
    let mut videos = Vec::with_capacity(corpus.train_videos.len());
    for (i, video) in corpus.train_videos.iter().enumerate() {
        let identity_index = corpus
            .train_identities
            .iter()
            .position(|id| id.id_seed == video.identity.id_seed)
            .ok_or_else(|| {
                Error::invalid(format!("video {i} references an identity missing from the corpus"))
            })?;
        let frames_file = format!("{CORPUS_FRAMES_DIR}/video_{i:04}.tvt");
        let container = Container {
            kind: KIND_FRAMES.to_string(),
            meta: json!({ "video_index": i }),
            tensors: BTreeMap::from([("frames".to_string(), video.frames.clone())]),
        };
        write_container(dir.join(&frames_file), &container)?;
        videos.push(CorpusVideoEntry {
            identity_index,
            motion_id: video.motion_id,
            background_id: video.background_id,
            prompt: video.prompt.clone(),
            face_boxes: video.face_boxes.clone(),
            frames_file,
            shape: video.frames.shape().to_vec(),
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        seed: corpus.seed,
        n_videos_per_identity: corpus.n_videos_per_identity,
        train_identities: corpus.train_identities.clone(),
        heldout_identities: corpus.heldout_identities.clone(),
        videos,
    };
    save_json(dir.join(CORPUS_MANIFEST_FILE), &manifest)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest: CorpusManifest = load_json(dir.join(CORPUS_MANIFEST_FILE))?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::Format(format!(
            "{}: format tag {:?}, expected {CORPUS_FORMAT:?}",
            dir.display(),
            manifest.format
        )));
    }
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Format(format!(
            "{}: corpus version {}, this build reads {CORPUS_VERSION}",
            dir.display(),
            manifest.version
        )));
    }
    let mut train_videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let frames_path = dir.join(&entry.frames_file);
        let container = read_container(&frames_path)?;
        expect_kind(&container, KIND_FRAMES, &frames_path)?;
        let frames = container.tensors.get("frames").cloned().ok_or_else(|| {
            Error::Format(format!("{}: missing the frames entry", frames_path.display()))
        })?;
        if frames.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: frames shaped {:?}, manifest says {:?}",
                frames_path.display(),
                frames.shape(),
                entry.shape
            )));
        }
        let identity = manifest
            .train_identities
            .get(entry.identity_index)
            .cloned()
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: identity index {} out of range",
                    dir.display(),
                    entry.identity_index
                ))
            })?;
        train_videos.push(SceneVideo {
            frames,
            identity,
            motion_id: entry.motion_id,
            background_id: entry.background_id,
            face_boxes: entry.face_boxes.clone(),
            prompt: entry.prompt.clone(),
        });
    }
    Ok(Corpus {
        train_videos,
        train_identities: manifest.train_identities,
        heldout_identities: manifest.heldout_identities,
        seed: manifest.seed,
        n_videos_per_identity: manifest.n_videos_per_identity,
    })
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    fn eat(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    fn eat_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.eat(&v.to_bits().to_le_bytes());
        }
    }
}

fn eat_identity(h: &mut Fnv, identity: &Identity) {
    h.eat(&identity.id_seed.to_le_bytes());
    h.eat_f64s(&identity.appearance);
    let b = identity.face_box_template;
    h.eat_f64s(&[b.x, b.y, b.w, b.h]);
}

/// Order-sensitive checksum over identities, prompts, boxes, and frame bits.
/// Stable across a save/load round trip, so regeneration can be compared to
/// a persisted corpus without byte-diffing directories.
pub fn corpus_checksum(corpus: &Corpus) -> u64 {
    let mut h = Fnv::new();
    h.eat(&corpus.seed.to_le_bytes());
    h.eat(&(corpus.n_videos_per_identity as u64).to_le_bytes());
    for identity in corpus.train_identities.iter().chain(&corpus.heldout_identities) {
        eat_identity(&mut h, identity);
    }
    for video in &corpus.train_videos {
        eat_identity(&mut h, &video.identity);
        h.eat(video.motion_id.phrase().as_bytes());
        h.eat(video.background_id.phrase().as_bytes());
        h.eat(video.prompt.text.as_bytes());
        for b in &video.face_boxes {
            h.eat_f64s(&[b.x, b.y, b.w, b.h]);
        }
        h.eat_f64s(video.frames.data());
    }
    h.0
}

// ---------------------------------------------------------------------------
// Prompt pools
// ---------------------------------------------------------------------------

/// Write a pool as `prompts.txt` (one prompt per line, for reading and
/// hand-editing) plus a `prompts.json` sidecar holding the structured ids.
pub fn export_pool(dir: impl AsRef<Path>, pool: &PromptPool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for prompt in &pool.prompts {
        lines.push_str(&prompt.text);
        lines.push('\n');
    }
    fs::write(dir.join(POOL_TEXT_FILE), lines)?;
    save_json(dir.join(POOL_SIDECAR_FILE), pool)
}

/// Read a pool back through its structured sidecar.
pub fn import_pool(dir: impl AsRef<Path>) -> Result<PromptPool> {
    let pool: PromptPool = load_json(dir.as_ref().join(POOL_SIDECAR_FILE))?;
    if pool.prompts.is_empty() {
        return Err(Error::Format(format!("{}: empty prompt pool", dir.as_ref().display())));
    }
    Ok(pool)
}

/// Build a pool from a user-supplied text file, one prompt per line; blank
/// lines and `#` comments are skipped. Each line must mention exactly one
/// known motion phrase and one background phrase so alignment scoring stays
/// defined; the line's first token is taken as the subject.
pub fn pool_from_text(path: impl AsRef<Path>) -> Result<PromptPool> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut prompts = Vec::new();
    for (index, raw) in fs::read_to_string(path)?.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = index + 1;
        let motions: Vec<MotionId> =
            MotionId::all().into_iter().filter(|m| line.contains(m.phrase())).collect();
        let backgrounds: Vec<BackgroundId> =
            BackgroundId::all().into_iter().filter(|b| line.contains(b.phrase())).collect();
        if motions.len() != 1 || backgrounds.len() != 1 {
            return Err(Error::invalid(format!(
                "{}:{lineno}: a prompt needs exactly one known motion phrase and one \
                 background phrase, found {} and {}",
                path.display(),
                motions.len(),
                backgrounds.len()
            )));
        }
        let subject_token = line.split_whitespace().next().unwrap_or_default().to_string();
        prompts.push(PromptSpec {
            text: line.to_string(),
            subject_token,
            motion_id: motions[0],
            background_id: backgrounds[0],
            embedding: text::pooled_embedding(line, text::DEFAULT_TEXT_WIDTH),
        });
    }
    if prompts.is_empty() {
        return Err(Error::invalid(format!("{}: no prompts found", path.display())));
    }
    Ok(PromptPool { prompts, seed: 0 })
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Top-level description every run directory carries, so artifacts stay
/// interpretable without the command line that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub seed: u64,
    /// Logical artifact name -> path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            format: RUN_FORMAT.to_string(),
            version: RUN_VERSION,
            command: command.into(),
            seed,
            artifacts: BTreeMap::new(),
        }
    }
}

/// Create a run directory with its manifest and resolved-config snapshot.
pub fn init_run_dir<C: Serialize>(
    dir: impl AsRef<Path>,
    manifest: &RunManifest,
    resolved_config: &C,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_json(dir.join(RUN_MANIFEST_FILE), manifest)?;
    save_json(dir.join(CONFIG_SNAPSHOT_FILE), resolved_config)
}

pub fn checkpoint_path(dir: impl AsRef<Path>, step: usize) -> PathBuf {
    dir.as_ref().join(CHECKPOINT_DIR).join(format!("step_{step:06}.tvt"))
}
