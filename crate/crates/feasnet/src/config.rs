//! Run configuration: one JSON file with a section per pipeline stage.
//! Every section falls back to field defaults, and unknown keys are
//! rejected so a typo cannot silently run the wrong experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fs::FsConfig;
use crate::problems::{Kind, Variant};
use crate::train::{AdaptiveSchedule, Baseline, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilySection {
    pub kind: Kind,
    pub variant: Variant,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub seed: u64,
}

impl Default for FamilySection {
    fn default() -> Self {
        Self { kind: Kind::Qp, variant: Variant::Convex, n: 50, n_eq: 25, n_ineq: 25, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { train: 1000, val: 200, test: 400, seed: 1 }
    }
}

/// Training knobs minus the solver settings, which live in the shared
/// top-level `fs` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub rho: f64,
    pub rho_phi: f64,
    pub q_threshold: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub baseline: Baseline,
    pub penalty_weights: (f64, f64),
    pub adaptive: AdaptiveSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            rho: t.rho,
            rho_phi: t.rho_phi,
            q_threshold: t.q_threshold,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            lr_decay_steps: t.lr_decay_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            baseline: t.baseline,
            penalty_weights: t.penalty_weights,
            adaptive: t.adaptive,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, fs: FsConfig) -> TrainConfig {
        TrainConfig {
            rho: self.rho,
            rho_phi: self.rho_phi,
            q_threshold: self.q_threshold,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            lr_decay_steps: self.lr_decay_steps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            fs,
            baseline: self.baseline,
            penalty_weights: self.penalty_weights,
            adaptive: self.adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Split the `eval` subcommand scores.
    pub split: SplitName,
    /// Splits the `oracle` subcommand solves and caches.
    pub oracle_splits: Vec<SplitName>,
    /// Tracked-iteration counts the `sweep-k` subcommand trains with.
    pub k_list: Vec<usize>,
    /// Distance weights the `sweep-rho` subcommand trains with.
    pub rho_list: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            oracle_splits: vec![SplitName::Val, SplitName::Test],
            k_list: vec![0, 5, 10, 25, 50],
            rho_list: vec![0.0, 5.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub family: FamilySection,
    pub dataset: DatasetSection,
    pub fs: FsConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.family;
        if f.n == 0 || f.n_eq == 0 || f.n_eq >= f.n {
            return Err(Error::Config("family needs 0 < n_eq < n".into()));
        }
        let d = &self.dataset;
        if d.train + d.val + d.test == 0 {
            return Err(Error::Config("dataset needs at least one instance".into()));
        }
        if self.eval.oracle_splits.is_empty() {
            return Err(Error::Config("eval.oracle_splits must name at least one split".into()));
        }
        if self.eval.k_list.is_empty() || self.eval.rho_list.is_empty() {
            return Err(Error::Config("sweep lists must not be empty".into()));
        }
        self.train.to_train_config(self.fs).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config(self.fs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.family.n, cfg.family.n);
        assert_eq!(back.dataset.train, 1000);
        assert_eq!(back.eval.split, SplitName::Test);
    }

    #[test]
    fn empty_document_means_all_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.family.n, 50);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"family": {"n": 10, "n_eq": 5}, "train": {"epochs": 3}}"#)
                .unwrap();
        assert_eq!(cfg.family.n, 10);
        assert_eq!(cfg.family.n_ineq, 25);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.rho, 5.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"familly": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epocs": 3}}"#).is_err());
    }

    #[test]
    fn load_maps_errors_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let missing = RunConfig::load(&dir.path().join("nope.json")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        let parse = RunConfig::load(&bad).unwrap_err();
        assert_eq!(parse.exit_code(), 2);

        let invalid = dir.path().join("invalid.json");
        std::fs::write(&invalid, r#"{"family": {"n": 5, "n_eq": 5}}"#).unwrap();
        let val = RunConfig::load(&invalid).unwrap_err();
        assert_eq!(val.exit_code(), 2);
    }

    #[test]
    fn train_section_assembles_full_config() {
        let cfg = RunConfig::default();
        let t = cfg.train_config();
        t.validate().unwrap();
        assert_eq!(t.fs.max_iters, cfg.fs.max_iters);
    }
}
