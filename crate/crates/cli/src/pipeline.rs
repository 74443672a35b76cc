//! One handler per subcommand. Each writes a self-describing run directory:
//! manifest, resolved-config snapshot, and the artifacts the command exists
//! to produce.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tinyvid_core::artifacts::{
    append_loss_records, checkpoint_path, corpus_checksum, init_run_dir, load_checkpoint,
    load_corpus, load_denoiser, load_json, load_reward_models, loss_records, save_adapter,
    save_checkpoint, save_corpus, save_denoiser, save_json, save_reward_models, DenoiserManifest,
    RewardsManifest, RunManifest, ADAPTER_FILE, CHECKPOINT_DIR, CONFIG_SNAPSHOT_FILE,
    DENOISER_FILE, LOSS_LOG_FILE, REPORT_CSV_FILE, REPORT_JSON_FILE, REWARDS_FILE,
};
use tinyvid_core::eval::{report, EvalVideo, RunSpec};
use tinyvid_core::model::ModelConfig;
use tinyvid_core::optim::OptimConfig;
use tinyvid_core::prompts::{build_prompt_pool, GrammarConfig, PromptSpec, KEYWORD};
use tinyvid_core::rewards::{fit_reward_models, RewardModels};
use tinyvid_core::scenario::{self, PretrainConfig, Scenario};
use tinyvid_core::trainer::{
    baseline_resume, generate_videos, resume, run_ablation_grid, AblationCell, AblationContext,
    TrainConfig, TrainMode, TrainState,
};
use tinyvid_core::world::{make_references, BackgroundId, Corpus, MotionId};
use tinyvid_core::{Error, Result};

use crate::config::{self, pick, CorpusFile, FitFile, PretrainFile};
use crate::{media, store, AblateArgs, EvaluateArgs, ExportArgs, FitArgs, FitRewardsArgs,
    GenCorpusArgs, PretrainArgs};

pub fn gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let file: CorpusFile = config::load(args.config.as_deref())?;
    let identities = pick(args.identities, file.identities, scenario::STANDARD_IDENTITIES);
    let videos = pick(
        args.videos_per_identity,
        file.videos_per_identity,
        scenario::STANDARD_VIDEOS_PER_IDENTITY,
    );
    let heldout = pick(args.heldout, file.heldout, scenario::STANDARD_HELDOUT_IDENTITIES);
    let seed = pick(args.seed, file.seed, scenario::STANDARD_CORPUS_SEED);

    let corpus = tinyvid_core::world::make_corpus(identities, videos, heldout, seed)?;
    save_corpus(&args.out, &corpus)?;
    println!(
        "corpus: {} identities ({heldout} held out), {} clips, checksum {:016x}",
        identities,
        corpus.train_videos.len(),
        corpus_checksum(&corpus)
    );
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let file: PretrainFile = config::load(args.config.as_deref())?;
    let corpus = load_corpus(&args.corpus)?;
    let defaults = PretrainConfig::default();
    let cfg = PretrainConfig {
        iterations: pick(args.iterations, file.iterations, defaults.iterations),
        optim: OptimConfig {
            learning_rate: pick(
                args.learning_rate,
                file.learning_rate,
                defaults.optim.learning_rate,
            ),
            ..defaults.optim
        },
        sampler_steps: pick(args.sampler_steps, file.sampler_steps, defaults.sampler_steps),
        cond_dropout: pick(None, file.cond_dropout, defaults.cond_dropout),
        recon_weight: pick(None, file.recon_weight, defaults.recon_weight),
        seed: pick(args.seed, file.seed, defaults.seed),
        ..defaults
    };
    let model = ModelConfig::toy_default();

    let (state, pretrain_report) = scenario::pretrain(&corpus, &model, &cfg)?;

    let mut manifest = RunManifest::new("pretrain", cfg.seed);
    manifest.artifacts.insert("denoiser".into(), DENOISER_FILE.into());
    manifest.artifacts.insert("report".into(), REPORT_JSON_FILE.into());
    init_run_dir(
        &args.out,
        &manifest,
        &json!({
            "command": "pretrain",
            "corpus": args.corpus,
            "model": model,
            "pretrain": cfg,
        }),
    )?;
    save_denoiser(
        args.out.join(DENOISER_FILE),
        &state,
        &DenoiserManifest {
            config: model,
            schedule: cfg.schedule,
            sampler_steps: cfg.sampler_steps,
            seed: cfg.seed,
            pretrain_iterations: cfg.iterations,
        },
    )?;
    save_json(args.out.join(REPORT_JSON_FILE), &pretrain_report)?;
    println!(
        "pretrained {} iterations: loss {:.4} -> {:.4}",
        pretrain_report.iterations, pretrain_report.initial_total, pretrain_report.final_total
    );
    Ok(())
}

pub fn fit_rewards(args: &FitRewardsArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let seed = args.seed.unwrap_or(scenario::STANDARD_REWARDS_SEED);
    let (models, fit_report) = fit_reward_models(&corpus, seed)?;

    let mut manifest = RunManifest::new("fit-rewards", seed);
    manifest.artifacts.insert("rewards".into(), REWARDS_FILE.into());
    manifest.artifacts.insert("report".into(), REPORT_JSON_FILE.into());
    init_run_dir(
        &args.out,
        &manifest,
        &json!({ "command": "fit-rewards", "corpus": args.corpus, "seed": seed }),
    )?;
    save_reward_models(
        args.out.join(REWARDS_FILE),
        &models,
        &RewardsManifest { seed, report: fit_report.clone() },
    )?;
    save_json(args.out.join(REPORT_JSON_FILE), &fit_report)?;
    println!(
        "fitted reward models: same/cross identity cosine {:.3}/{:.3} (reward), {:.3}/{:.3} (eval)",
        fit_report.reward_same_id_cos,
        fit_report.reward_cross_id_cos,
        fit_report.eval_same_id_cos,
        fit_report.eval_cross_id_cos
    );
    Ok(())
}

/// Everything `personalize`/`baseline` resolved from flags, file, and
/// defaults; serialized into the run directory as the config snapshot.
/// On resume the previous snapshot supplies the defaults, so parameters a
/// user overrode when the run started stay in force without repeating them.
#[derive(serde::Serialize, serde::Deserialize)]
struct FitSnapshot {
    command: String,
    corpus: PathBuf,
    denoiser: PathBuf,
    rewards: Option<PathBuf>,
    identity: usize,
    train: TrainConfig,
    pool_size: usize,
    pool_seed: u64,
    references_seed: u64,
    eval_clips: usize,
    eval_seed: u64,
}

fn resolve_fit(args: &FitArgs, file: &FitFile, base: &TrainConfig, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        iterations: pick(args.iterations, file.iterations, base.iterations),
        optim: OptimConfig {
            learning_rate: pick(
                args.learning_rate,
                file.learning_rate,
                base.optim.learning_rate,
            ),
            ..base.optim.clone()
        },
        sampler_steps: pick(args.sampler_steps, file.sampler_steps, base.sampler_steps),
        cfg_scale: pick(args.cfg_scale, file.cfg_scale, base.cfg_scale),
        m_frames: pick(args.m_frames, file.m_frames, base.m_frames),
        k_references: pick(args.k_references, file.k_references, base.k_references),
        gate_fraction: pick(args.gate_fraction, file.gate_fraction, base.gate_fraction),
        rank: pick(args.rank, file.rank, base.rank),
        mode,
        icr_weight: pick(args.icr_weight, file.icr_weight, base.icr_weight),
        scr_weight: pick(args.scr_weight, file.scr_weight, base.scr_weight),
        augment_strength: pick(None, file.augment_strength, base.augment_strength),
        seed: pick(args.seed, file.seed, base.seed),
        adapter_seed: pick(None, file.adapter_seed, base.adapter_seed),
        checkpoint_every: pick(args.checkpoint_every, file.checkpoint_every, base.checkpoint_every),
        ..base.clone()
    }
}

fn newest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = run.join(CHECKPOINT_DIR);
    let mut best: Option<PathBuf> = None;
    if dir.is_dir() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("step_") && name.ends_with(".tvt") {
                if best.as_ref().is_none_or(|b| path > *b) {
                    best = Some(path);
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::MissingArtifact(format!("{} (no checkpoint to resume from)", dir.display()))
    })
}

pub fn personalize(args: &FitArgs) -> Result<()> {
    fit_adapter(args, TrainMode::Reward)
}

pub fn baseline(args: &FitArgs) -> Result<()> {
    fit_adapter(args, TrainMode::Reconstruction)
}

fn fit_adapter(args: &FitArgs, mode: TrainMode) -> Result<()> {
    let command = match mode {
        TrainMode::Reward => "personalize",
        TrainMode::Reconstruction => "baseline",
    };
    let file: FitFile = config::load(args.config.as_deref())?;
    let (frozen, _) = load_denoiser(&args.denoiser)?;
    let corpus = load_corpus(&args.corpus)?;

    // Resuming continues under the checkpoint's own configuration and the
    // run's recorded snapshot unless a flag or config file overrides a value.
    let (loaded_state, base, prior) = if args.resume {
        let (state, saved) = load_checkpoint(&newest_checkpoint(&args.out)?)?;
        let snapshot: FitSnapshot = load_json(args.out.join(CONFIG_SNAPSHOT_FILE))?;
        (Some(state), saved, Some(snapshot))
    } else {
        (None, Scenario::standard().train, None)
    };
    let train = resolve_fit(args, &file, &base, mode);

    let scenario = Scenario::standard();
    let defaults = match &prior {
        Some(p) => {
            (p.pool_size, p.pool_seed, p.references_seed, p.eval_clips, p.eval_seed, p.identity)
        }
        None => (
            scenario.pool_size,
            scenario.pool_seed,
            scenario.references_seed,
            scenario.eval_clips,
            scenario.eval_seed,
            0,
        ),
    };
    let pool_size = pick(args.pool_size, file.pool_size, defaults.0);
    let pool_seed = pick(args.pool_seed, file.pool_seed, defaults.1);
    let references_seed = pick(args.references_seed, file.references_seed, defaults.2);
    let eval_clips = pick(args.eval_clips, file.eval_clips, defaults.3);
    let eval_seed = pick(args.eval_seed, file.eval_seed, defaults.4);
    let identity_index = args.identity.unwrap_or(defaults.5);

    if identity_index >= corpus.heldout_identities.len() {
        return Err(Error::invalid(format!(
            "identity index {identity_index} out of range: corpus holds {} held-out identities",
            corpus.heldout_identities.len()
        )));
    }
    let identity = &corpus.heldout_identities[identity_index];
    let refs = make_references(identity, train.k_references, references_seed)?;
    let rewards: Option<RewardModels> = match mode {
        TrainMode::Reward => {
            let path = args
                .rewards
                .as_ref()
                .ok_or_else(|| Error::invalid("personalize requires --rewards"))?;
            Some(load_reward_models(path)?.0)
        }
        TrainMode::Reconstruction => None,
    };
    let pool = build_prompt_pool(pool_size, &GrammarConfig::default(), pool_seed)?;
    let bare_prompt = PromptSpec::new(KEYWORD, "", MotionId::Static, BackgroundId::Meadow);

    let mut manifest = RunManifest::new(command, train.seed);
    for (name, path) in [
        ("adapter", ADAPTER_FILE),
        ("references", store::REFS_FILE),
        ("videos", store::VIDEOS_DIR),
        ("loss_log", LOSS_LOG_FILE),
        ("checkpoints", CHECKPOINT_DIR),
    ] {
        manifest.artifacts.insert(name.into(), path.into());
    }
    let snapshot = FitSnapshot {
        command: command.into(),
        corpus: args.corpus.clone(),
        denoiser: args.denoiser.clone(),
        rewards: args.rewards.clone(),
        identity: identity_index,
        train: train.clone(),
        pool_size,
        pool_seed,
        references_seed,
        eval_clips,
        eval_seed,
    };
    init_run_dir(&args.out, &manifest, &snapshot)?;
    store::save_refs(&args.out, &refs)?;
    let mut state = match loaded_state {
        Some(state) => state,
        None => TrainState::init(&frozen, &train)?,
    };

    // Train in checkpoint-sized chunks, appending the loss log as we go.
    let every = match train.checkpoint_every {
        0 => train.iterations.max(1),
        n => n,
    };
    let log = args.out.join(LOSS_LOG_FILE);
    while state.step < train.iterations {
        let target = (state.step + every).min(train.iterations);
        let chunk = TrainConfig { iterations: target, ..train.clone() };
        let logged = state.history.len();
        match mode {
            TrainMode::Reward => resume(
                &mut state,
                &refs,
                &pool,
                &frozen,
                rewards.as_ref().expect("reward mode loads models"),
                &chunk,
            )?,
            TrainMode::Reconstruction => baseline_resume(
                &mut state,
                &refs,
                std::slice::from_ref(&bare_prompt),
                &frozen,
                &chunk,
            )?,
        }
        append_loss_records(&log, &loss_records(&state.history[logged..], logged))?;
        fs::create_dir_all(args.out.join(CHECKPOINT_DIR))?;
        save_checkpoint(checkpoint_path(&args.out, state.step), &state, &train)?;
    }
    save_adapter(args.out.join(ADAPTER_FILE), &state.adapter, state.step)?;

    let videos = generate_videos(
        Some(&state.adapter),
        &pool.prompts,
        &frozen,
        &train,
        eval_clips,
        eval_seed,
    )?;
    store::save_videos(&args.out, &videos)?;

    let last = state.history.last();
    println!(
        "{command}: {} steps for held-out identity {}; final loss {}; {} eval clips in {}",
        state.step,
        identity_index,
        last.map_or("n/a".into(), |b| format!("{:.4}", b.total)),
        videos.len(),
        args.out.display()
    );
    Ok(())
}

/// The standard ablation grid; `--cells` picks a subset by label.
fn standard_cells(base: &TrainConfig) -> Vec<AblationCell> {
    let cell = |label: &str, gate: f64, scr_on: bool, aug_on: bool| AblationCell {
        label: label.into(),
        gate_fraction: gate,
        target_kinds: base.target_kinds.clone(),
        scr_on,
        aug_on,
    };
    vec![
        cell("gate-quarter", 0.25, true, true),
        cell("gate-half", 0.5, true, true),
        cell("gate-full", 1.0, true, true),
        cell("scr-off", base.gate_fraction, false, true),
        cell("single-prompt", base.gate_fraction, true, false),
    ]
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let file: FitFile = config::load(args.config.as_deref())?;
    let (frozen, _) = load_denoiser(&args.denoiser)?;
    let (rewards, _) = load_reward_models(&args.rewards)?;
    let corpus = load_corpus(&args.corpus)?;
    let scenario = Scenario::standard();

    let mut base = scenario.train.clone();
    base.iterations = pick(args.iterations, file.iterations, base.iterations);
    base.seed = pick(args.seed, file.seed, base.seed);
    if let Some(lr) = file.learning_rate {
        base.optim.learning_rate = lr;
    }

    let identity_index = args.identity;
    if identity_index >= corpus.heldout_identities.len() {
        return Err(Error::invalid(format!(
            "identity index {identity_index} out of range: corpus holds {} held-out identities",
            corpus.heldout_identities.len()
        )));
    }
    let identity = &corpus.heldout_identities[identity_index];
    let refs = make_references(identity, base.k_references, scenario.references_seed)?;
    let pool = build_prompt_pool(scenario.pool_size, &GrammarConfig::default(), scenario.pool_seed)?;
    let reference_videos: Vec<EvalVideo> =
        corpus.train_videos.iter().map(EvalVideo::from_scene).collect();

    let all = standard_cells(&base);
    let cells: Vec<AblationCell> = match &args.cells {
        None => all,
        Some(labels) => labels
            .iter()
            .map(|label| {
                all.iter().find(|c| &c.label == label).cloned().ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown cell '{label}'; known cells: {}",
                        all.iter().map(|c| c.label.as_str()).collect::<Vec<_>>().join(", ")
                    ))
                })
            })
            .collect::<Result<_>>()?,
    };

    let ctx = AblationContext {
        refs: &refs,
        pool: &pool,
        bare_prompt: PromptSpec::new(KEYWORD, "", MotionId::Static, BackgroundId::Meadow),
        frozen: &frozen,
        rewards: &rewards,
        reference_videos: &reference_videos,
        eval_clips: scenario.eval_clips,
        eval_seed: scenario.eval_seed,
    };
    let rows = run_ablation_grid(&ctx, &base, &cells);

    let mut manifest = RunManifest::new("ablate", base.seed);
    manifest.artifacts.insert("rows".into(), "ablation.json".into());
    init_run_dir(
        &args.out,
        &manifest,
        &json!({
            "command": "ablate",
            "corpus": args.corpus,
            "denoiser": args.denoiser,
            "rewards": args.rewards,
            "identity": args.identity,
            "train": base,
            "cells": cells,
        }),
    )?;
    save_json(args.out.join("ablation.json"), &rows)?;
    for row in &rows {
        match (&row.report, &row.error) {
            (Some(r), _) => println!(
                "cell {}: face_sim {:.4} dynamic {:.4} alignment {:.4}",
                row.cell.label, r.face_sim, r.dynamic_degree, r.text_alignment
            ),
            (None, Some(e)) => println!("cell {}: failed: {e}", row.cell.label),
            (None, None) => println!("cell {}: no result", row.cell.label),
        }
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let (models, _) = load_reward_models(&args.rewards)?;
    let corpus: Corpus = load_corpus(&args.corpus)?;
    let reference_videos: Vec<EvalVideo> =
        corpus.train_videos.iter().map(EvalVideo::from_scene).collect();

    let mut loaded = Vec::new();
    for run in &args.runs {
        let videos = store::load_videos(run)?;
        if videos.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "{} (no generated clips to evaluate)",
                run.join(store::VIDEOS_DIR).display()
            )));
        }
        let refs = store::load_refs(run)?;
        let label = run
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("run")
            .to_string();
        loaded.push((label, videos, refs));
    }
    let runs: Vec<RunSpec> = loaded
        .iter()
        .map(|(label, videos, refs)| RunSpec { label: label.clone(), videos, refs })
        .collect();
    let (rows, table) = report(&runs, &reference_videos, &models)?;
    print!("{table}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(REPORT_CSV_FILE), &table)?;
        save_json(out.join(REPORT_JSON_FILE), &rows)?;
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    media::export_run(&args.run, args.format, &args.out)
}
