//! Layered run configuration.
//!
//! A run resolves its configuration in three layers: compiled defaults,
//! then an optional JSON file merged section by section, then command-line
//! overrides. Unknown keys anywhere are rejected with the offending key
//! named. The resolved result is serialized, hashed and embedded in every
//! artifact the run produces, so artifacts can always be traced back to
//! the exact settings that made them.
//!
//! One root seed drives everything: the training and codec sections keep
//! their own `seed` fields for the core APIs, but resolution overwrites
//! both with the top-level value.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use userstate_core::augment::AugmentPolicy;
use userstate_core::backbone::BundleConfig;
use userstate_core::codec::{CodecConfig, CodecTrainConfig};
use userstate_core::data::TrainConfig;
use userstate_core::face::RotationMode;
use userstate_core::synth::{AudioMode, GeneratorSpec};
use userstate_core::trainer::OptimizerConfig;
use userstate_core::util::sha256_hex;

use crate::CliError;

/// Strong-augmentation settings. `ops` of `null` selects the full reduced
/// op set; an explicit list must name known, non-geometric ops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub ops: Option<Vec<String>>,
    pub ops_per_sample: usize,
    pub magnitude: u32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection { ops: None, ops_per_sample: 2, magnitude: 10 }
    }
}

impl AugmentSection {
    pub fn policy(&self) -> Result<AugmentPolicy, CliError> {
        let policy = match &self.ops {
            None => AugmentPolicy::full_set(self.ops_per_sample, self.magnitude)?,
            Some(names) => {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                AugmentPolicy::from_names(&names, self.ops_per_sample, self.magnitude)?
            }
        };
        Ok(policy)
    }
}

/// Synthetic-data settings shared by `synth` and the synthetic codec
/// corpus of `train-codec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub labeled: usize,
    pub unlabeled: usize,
    pub rare_rate: f64,
    pub noise: f64,
    pub label_noise: f64,
    pub priors: [f64; 4],
    pub audio_mode: AudioMode,
    /// Corpus size when `train-codec` runs without a dataset.
    pub codec_chunks: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            labeled: 24,
            unlabeled: 48,
            rare_rate: 0.15,
            noise: 0.2,
            label_noise: 0.0,
            priors: [0.25; 4],
            audio_mode: AudioMode::Latent,
            codec_chunks: 240,
        }
    }
}

impl SynthSection {
    pub fn generator_spec(&self, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            noise: self.noise,
            label_noise: self.label_noise,
            priors: self.priors,
            audio_mode: self.audio_mode,
            seed,
        }
    }
}

/// The full resolved configuration of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub runs_root: PathBuf,
    /// Fraction of labeled data held out for validation by `train`.
    /// Zero disables validation.
    pub val_fraction: f64,
    pub infer_batch: usize,
    pub rotation_mode: RotationMode,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub bundle: BundleConfig,
    pub augment: AugmentSection,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            runs_root: PathBuf::from("runs"),
            val_fraction: 0.2,
            infer_batch: 64,
            rotation_mode: RotationMode::RelativeToFirst,
            train: desk_train_config(0),
            optimizer: OptimizerConfig::default(),
            bundle: BundleConfig::default(),
            augment: AugmentSection::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Default training section: small enough to finish on a desk in minutes,
/// structured like the full recipe.
fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        unlabeled_factor: 3,
        distill_start: 3,
        total_epochs: 8,
        fixmatch_threshold: 0.95,
        beta1: 1.0,
        beta2: 3.0,
        beta3: 2.0,
        folds: 2,
        seed,
    }
}

/// Command-line layer applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paper_preset: bool,
    pub runs_root: Option<PathBuf>,
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(base), serde_json::Value::Object(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

fn load_layered(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut base = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(CliError::Config(format!(
                "{}: configuration must be a JSON object",
                path.display()
            )));
        }
        merge(&mut base, overlay);
    }
    serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))
}

/// Resolves the effective configuration: defaults, then the file, then
/// overrides; propagates the root seed and validates every section.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = load_layered(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if overrides.paper_preset {
        cfg.train = TrainConfig::paper_preset(cfg.seed);
    }
    if let Some(runs) = &overrides.runs_root {
        cfg.runs_root = runs.clone();
    }
    cfg.train.seed = cfg.seed;
    cfg.codec_train.seed = cfg.seed;
    validate(&cfg)?;
    Ok(cfg)
}

/// Validates every section of a resolved configuration. Rerun after any
/// command-line overlay that touches section values.
pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.train.validate()?;
    cfg.bundle.validate()?;
    cfg.codec.validate()?;
    cfg.codec.mfcc.validate()?;
    cfg.augment.policy()?;
    cfg.synth.generator_spec(cfg.seed).validate()?;
    if !(0.0..=0.5).contains(&cfg.val_fraction) {
        return Err(CliError::Config(format!(
            "val_fraction must lie in [0, 0.5], got {}",
            cfg.val_fraction
        )));
    }
    if !(0.0..=1.0).contains(&cfg.synth.rare_rate) {
        return Err(CliError::Config(format!(
            "synth.rare_rate must lie in [0, 1], got {}",
            cfg.synth.rare_rate
        )));
    }
    if cfg.infer_batch == 0 {
        return Err(CliError::Config("infer_batch must be positive".into()));
    }
    Ok(())
}

/// SHA-256 of the resolved configuration's canonical JSON form.
pub fn config_hash(cfg: &RunConfig) -> Result<String, CliError> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

/// Prints the resolved configuration and its hash without running.
pub fn emit_resolved(cfg: &RunConfig) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    println!("{}", serde_json::json!({ "config_hash": config_hash(cfg)? }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_resolve_and_hash_stably() {
        let a = resolve(None, &Overrides::default()).unwrap();
        let b = resolve(None, &Overrides::default()).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn partial_sections_layer_over_defaults() {
        let f = write_tmp(r#"{"seed": 9, "train": {"batch_size": 2}}"#);
        let cfg = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.seed, 9, "root seed propagates");
        assert_eq!(cfg.train.folds, 2, "untouched fields keep defaults");
        assert_ne!(
            config_hash(&cfg).unwrap(),
            config_hash(&resolve(None, &Overrides::default()).unwrap()).unwrap()
        );
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let f = write_tmp(r#"{"train": {"batch_sizes": 2}}"#);
        let err = resolve(Some(f.path()), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("batch_sizes"), "got {err}");
    }

    #[test]
    fn paper_preset_sets_published_hyperparameters() {
        let ov = Overrides { paper_preset: true, seed: Some(5), ..Overrides::default() };
        let cfg = resolve(None, &ov).unwrap();
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.train.unlabeled_factor, 10);
        assert_eq!(cfg.train.distill_start, 10);
        assert_eq!(cfg.train.total_epochs, 500);
        assert_eq!(cfg.train.fixmatch_threshold, 0.95);
        assert_eq!((cfg.train.beta1, cfg.train.beta2, cfg.train.beta3), (1.0, 3.0, 2.0));
        assert_eq!(cfg.train.folds, 5);
        assert_eq!(cfg.train.seed, 5);
    }

    #[test]
    fn invalid_values_fail_with_context() {
        let f = write_tmp(r#"{"val_fraction": 0.9}"#);
        let err = resolve(Some(f.path()), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("val_fraction"), "got {err}");

        let f = write_tmp(r#"{"augment": {"ops": ["rotate"]}}"#);
        assert!(resolve(Some(f.path()), &Overrides::default()).is_err());
    }
}
