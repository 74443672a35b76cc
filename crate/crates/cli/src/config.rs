//! JSON config files for the subcommands. Every key is optional; resolution
//! order is command-line flag, then config-file value, then built-in default.
//! Unknown keys are rejected so a typo cannot silently fall back to a default.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use tinyvid_core::{Error, Result};

/// Keys accepted by `gen-corpus --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub identities: Option<usize>,
    pub videos_per_identity: Option<usize>,
    pub heldout: Option<usize>,
    pub seed: Option<u64>,
}

/// Keys accepted by `pretrain --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub sampler_steps: Option<usize>,
    pub cond_dropout: Option<f64>,
    pub recon_weight: Option<f64>,
    pub seed: Option<u64>,
}

/// Keys accepted by `personalize --config`, `baseline --config`, and
/// `ablate --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub rank: Option<usize>,
    pub gate_fraction: Option<f64>,
    pub icr_weight: Option<f64>,
    pub scr_weight: Option<f64>,
    pub m_frames: Option<usize>,
    pub k_references: Option<usize>,
    pub sampler_steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub augment_strength: Option<f64>,
    pub seed: Option<u64>,
    pub adapter_seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub pool_size: Option<usize>,
    pub pool_seed: Option<u64>,
    pub references_seed: Option<u64>,
    pub eval_clips: Option<usize>,
    pub eval_seed: Option<u64>,
}

/// Load a config file, or the all-`None` default when no path was given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

/// Flag beats file beats default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flag_beats_file_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<usize>(None, None, 3), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "{{\"iterations\": 5, \"iteratons\": 6}}").unwrap();
        let err = load::<FitFile>(Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("iteratons"));
    }

    #[test]
    fn absent_file_means_defaults() {
        let file: FitFile = load(None).unwrap();
        assert!(file.iterations.is_none());
    }
}
