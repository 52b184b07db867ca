//! The run configuration: a flat TOML table whose key names are stable.
//! Missing keys take their defaults, unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kt_core::dataset::{ParseOptions, DEFAULT_MIN_LEN};
use kt_core::harness::{SynthConfig, TrainConfig};
use kt_core::network::{AblationFlags, NetworkConfig, UnknownMasking};
use kt_core::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Locations.
    pub work_dir: String,
    pub data_path: String,
    pub synth_dir: String,

    // Ingest.
    pub lenient: bool,
    pub min_seq_len: usize,
    pub num_folds: usize,
    pub fold_seed: u64,

    // Fold preparation and graph.
    pub fold: usize,
    pub validation_fraction: f64,
    pub min_count: u32,
    pub seed: u64,

    // Pre-training.
    pub dim: usize,
    pub lambda_relation: f64,
    pub lambda_difficulty: f64,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
    pub negative_ratio: f64,
    pub max_positives: usize,
    pub pretrain_seed: u64,

    // Network.
    pub attention_hidden: usize,
    pub dnn_hidden: Vec<usize>,
    pub dropout: f64,
    pub log_counts: bool,
    pub conv_width: usize,
    pub conv_channels: usize,
    pub theta_init: f64,
    pub share_theta: bool,
    /// Comma-separated ablation flags; empty for the full model.
    pub ablate: String,

    // Fine-tuning.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reg_weight: f64,
    pub patience: usize,
    pub unknown_student_rate: f64,
    pub unknown_question_rate: f64,

    // The `ablate` command.
    pub ablation_variants: Vec<String>,
    pub ablation_folds: Vec<usize>,

    // The `synth` command.
    pub synth_students: usize,
    pub synth_questions: usize,
    pub synth_concepts: usize,
    pub synth_max_concepts: usize,
    pub synth_mastery_gain: f64,
    pub synth_forgetting_rate: f64,
    pub synth_difficulty_spread: f64,
    pub synth_ability_spread: f64,
    pub synth_concept_spread: f64,
    pub synth_mean_length: usize,
    pub synth_min_length: usize,
    pub synth_focus: f64,
    pub synth_seed: u64,

    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        Self {
            work_dir: "mfdakt-work".into(),
            data_path: "mfdakt-work/synth/log.csv".into(),
            synth_dir: "mfdakt-work/synth".into(),
            lenient: false,
            min_seq_len: DEFAULT_MIN_LEN,
            num_folds: 5,
            fold_seed: 1,
            fold: 0,
            validation_fraction: t.validation_fraction,
            min_count: t.min_count,
            seed: t.seed,
            dim: t.network.dim,
            lambda_relation: t.pretrain.lambda_relation,
            lambda_difficulty: t.pretrain.lambda_difficulty,
            pretrain_epochs: t.pretrain.epochs,
            pretrain_learning_rate: t.pretrain.learning_rate,
            pretrain_batch_size: t.pretrain.batch_size,
            negative_ratio: t.pretrain.negative_ratio,
            max_positives: t.pretrain.max_positives,
            pretrain_seed: t.pretrain.seed,
            attention_hidden: t.network.attention_hidden,
            dnn_hidden: t.network.dnn_hidden.clone(),
            dropout: t.network.dropout,
            log_counts: t.network.log_counts,
            conv_width: t.network.conv_width,
            conv_channels: t.network.conv_channels,
            theta_init: t.network.theta_init,
            share_theta: t.network.share_theta,
            ablate: String::new(),
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            reg_weight: t.reg_weight,
            patience: t.patience,
            unknown_student_rate: t.unknown.student_rate,
            unknown_question_rate: t.unknown.question_rate,
            ablation_variants: std::iter::once("full")
                .chain(AblationFlags::NAMES)
                .map(String::from)
                .collect(),
            ablation_folds: vec![0, 1, 2, 3, 4],
            synth_students: s.num_students,
            synth_questions: s.num_questions,
            synth_concepts: s.num_concepts,
            synth_max_concepts: s.max_concepts_per_question,
            synth_mastery_gain: s.mastery_gain,
            synth_forgetting_rate: s.forgetting_rate,
            synth_difficulty_spread: s.difficulty_spread,
            synth_ability_spread: s.ability_spread,
            synth_concept_spread: s.concept_spread,
            synth_mean_length: s.mean_length,
            synth_min_length: s.min_length,
            synth_focus: s.focus,
            synth_seed: s.seed,
            workers: 1,
        }
    }
}

/// Keys each stage's artifacts depend on, besides everything upstream.
pub const INGEST_KEYS: &[&str] = &["lenient", "min_seq_len", "num_folds", "fold_seed"];
pub const GRAPH_KEYS: &[&str] = &["fold", "validation_fraction", "min_count", "seed"];
pub const PRETRAIN_KEYS: &[&str] = &[
    "dim",
    "lambda_relation",
    "lambda_difficulty",
    "pretrain_epochs",
    "pretrain_learning_rate",
    "pretrain_batch_size",
    "negative_ratio",
    "max_positives",
    "pretrain_seed",
];
pub const TRAIN_KEYS: &[&str] = &[
    "attention_hidden",
    "dnn_hidden",
    "dropout",
    "log_counts",
    "conv_width",
    "conv_channels",
    "theta_init",
    "share_theta",
    "ablate",
    "epochs",
    "learning_rate",
    "batch_size",
    "reg_weight",
    "patience",
    "unknown_student_rate",
    "unknown_question_rate",
];
pub const ABLATION_KEYS: &[&str] = &["ablation_variants", "ablation_folds"];
// Listed so that the key-coverage test can account for every key.
#[cfg_attr(not(test), allow(dead_code))]
pub const SYNTH_KEYS: &[&str] = &[
    "synth_students",
    "synth_questions",
    "synth_concepts",
    "synth_max_concepts",
    "synth_mastery_gain",
    "synth_forgetting_rate",
    "synth_difficulty_spread",
    "synth_ability_spread",
    "synth_concept_spread",
    "synth_mean_length",
    "synth_min_length",
    "synth_focus",
    "synth_seed",
];
#[cfg_attr(not(test), allow(dead_code))]
/// Keys that never change an artifact: locations (the data file enters
/// by content) and the worker count.
pub const UNHASHED_KEYS: &[&str] = &["work_dir", "data_path", "synth_dir", "workers"];

/// Parses `key=value`, reading the value as a TOML value and falling back
/// to a bare string.
fn parse_override(text: &str) -> Result<(String, toml::Value), Failure> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{text}`")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

/// Command-line settings applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub workers: Option<usize>,
    pub lenient: bool,
    pub ablate: Option<String>,
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, Failure> {
        let mut table = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for s in &o.set {
            let (k, v) = parse_override(s)?;
            table.insert(k, v);
        }
        if let Some(w) = o.workers {
            table.insert("workers".into(), toml::Value::Integer(w as i64));
        }
        if o.lenient {
            table.insert("lenient".into(), toml::Value::Boolean(true));
        }
        if let Some(a) = &o.ablate {
            table.insert("ablate".into(), toml::Value::String(a.clone()));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Failure::Usage(format!("configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |m: String| Err(Failure::Usage(m));
        self.train_config()?.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        if self.num_folds < 2 || self.fold >= self.num_folds {
            return usage(format!("need num_folds >= 2 and fold < num_folds, got {} and {}", self.num_folds, self.fold));
        }
        if let Some(f) = self.ablation_folds.iter().find(|&&f| f >= self.num_folds) {
            return usage(format!("ablation fold {f} is not below num_folds {}", self.num_folds));
        }
        for v in &self.ablation_variants {
            AblationFlags::parse(v)
                .and_then(|f| f.validate())
                .map_err(|e| Failure::Usage(format!("ablation variant `{v}`: {e}")))?;
        }
        if self.workers == 0 {
            return usage("workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn flags(&self) -> Result<AblationFlags, Failure> {
        let flags = AblationFlags::parse(&self.ablate).map_err(|e| Failure::Usage(e.to_string()))?;
        flags.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(flags)
    }

    pub fn parse_options(&self) -> ParseOptions {
        if self.lenient {
            ParseOptions::lenient()
        } else {
            ParseOptions::strict()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        Ok(TrainConfig {
            network: NetworkConfig {
                dim: self.dim,
                attention_hidden: self.attention_hidden,
                dnn_hidden: self.dnn_hidden.clone(),
                dropout: self.dropout,
                log_counts: self.log_counts,
                conv_width: self.conv_width,
                conv_channels: self.conv_channels,
                theta_init: self.theta_init,
                share_theta: self.share_theta,
                flags: self.flags()?,
            },
            pretrain: PretrainConfig {
                dim: self.dim,
                lambda_relation: self.lambda_relation,
                lambda_difficulty: self.lambda_difficulty,
                epochs: self.pretrain_epochs,
                learning_rate: self.pretrain_learning_rate,
                negative_ratio: self.negative_ratio,
                batch_size: self.pretrain_batch_size,
                max_positives: self.max_positives,
                seed: self.pretrain_seed,
            },
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            reg_weight: self.reg_weight,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            unknown: UnknownMasking {
                student_rate: self.unknown_student_rate,
                question_rate: self.unknown_question_rate,
            },
            min_count: self.min_count,
            seed: self.seed,
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_students: self.synth_students,
            num_questions: self.synth_questions,
            num_concepts: self.synth_concepts,
            max_concepts_per_question: self.synth_max_concepts,
            mastery_gain: self.synth_mastery_gain,
            forgetting_rate: self.synth_forgetting_rate,
            difficulty_spread: self.synth_difficulty_spread,
            ability_spread: self.synth_ability_spread,
            concept_spread: self.synth_concept_spread,
            mean_length: self.synth_mean_length,
            min_length: self.synth_min_length,
            focus: self.synth_focus,
            seed: self.synth_seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    fn table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("flat config serializes")
    }

    /// Hash of `upstream` followed by the listed keys and `extra` entries,
    /// in sorted order.
    pub fn stage_hash(&self, stage: &str, upstream: &str, keys: &[&str], extra: &[(&str, String)]) -> String {
        let table = self.table();
        let mut entries: BTreeMap<String, String> = keys
            .iter()
            .map(|&k| (k.to_string(), table.get(k).map_or(String::new(), |v| v.to_string())))
            .collect();
        for (k, v) in extra {
            entries.insert((*k).to_string(), v.clone());
        }
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(upstream.as_bytes());
        for (k, v) in entries {
            h.update([0]);
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn work_dir(&self) -> &Path {
        Path::new(&self.work_dir)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_has_a_stage() {
        let groups = [INGEST_KEYS, GRAPH_KEYS, PRETRAIN_KEYS, TRAIN_KEYS, ABLATION_KEYS, SYNTH_KEYS, UNHASHED_KEYS];
        let table = RunConfig::default().table();
        for key in table.keys() {
            let n = groups.iter().filter(|g| g.contains(&key.as_str())).count();
            assert_eq!(n, 1, "key `{key}` is in {n} groups");
        }
        let listed: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(listed, table.len());
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synth_config(), SynthConfig::default());
    }

    #[test]
    fn overrides_are_typed() {
        let o = Overrides {
            set: vec!["epochs=3".into(), "dnn_hidden=[8, 4]".into(), "ablate=r_recent".into(), "dropout=0.5".into()],
            workers: Some(2),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!((c.epochs, c.workers, c.dropout), (3, 2, 0.5));
        assert_eq!(c.dnn_hidden, [8, 4]);
        assert!(c.flags().unwrap().r_recent);
    }

    #[test]
    fn bad_settings_are_usage_errors() {
        for bad in ["no_such_key=1", "epochs=-1", "epochs=\"many\"", "ablate=r_interaction,r_feature", "fold=7", "noequals"] {
            let o = Overrides {
                set: vec![bad.into()],
                ..Overrides::default()
            };
            assert!(matches!(RunConfig::resolve(&o), Err(Failure::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn hashes_follow_relevant_keys_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            epochs: 7,
            workers: 4,
            ..a.clone()
        };
        assert_eq!(a.stage_hash("p", "u", PRETRAIN_KEYS, &[]), b.stage_hash("p", "u", PRETRAIN_KEYS, &[]));
        assert_ne!(a.stage_hash("t", "u", TRAIN_KEYS, &[]), b.stage_hash("t", "u", TRAIN_KEYS, &[]));
        assert_ne!(a.stage_hash("t", "u", TRAIN_KEYS, &[]), a.stage_hash("t", "v", TRAIN_KEYS, &[]));
    }
}
