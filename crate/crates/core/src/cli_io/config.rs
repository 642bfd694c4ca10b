//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors, as is any missing required key.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lambert_w::Evaluation;
use crate::nn::ModelSpec;
use crate::pipeline::{Parameterization, TrainConfig};

const REQUIRED: &[&str] = &["dataset", "layers", "parameterization", "block_size", "budget_bits", "max_iters"];

const OPTIONAL: &[(&str, &str)] = &[
    ("data_dir", "data"),
    ("downsample", "2"),
    ("train_limit", "0"),
    ("test_limit", "0"),
    ("synthetic_points", "1000"),
    ("synthetic_classes", "10"),
    ("synthetic_dim", "16"),
    ("bias", "true"),
    ("learning_rate", "0.001"),
    ("batch_size", "200"),
    ("eps_beta0", "1e-8"),
    ("eps_beta", "5e-5"),
    ("finetune_steps", "100"),
    ("seed", "0"),
    ("seeds", "0,1,2"),
    ("repro_block_sizes", ""),
    ("output_dir", "out"),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: cannot parse `{value}` ({reason})")]
    Invalid { key: &'static str, value: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub downsample: usize,
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_points: usize,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub layers: Vec<usize>,
    pub bias: bool,
    pub parameterization: Parameterization,
    pub block_size: usize,
    pub budget_bits: u32,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eps_beta0: f64,
    pub eps_beta: f64,
    pub finetune_steps: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub repro_block_sizes: Vec<usize>,
    pub output_dir: PathBuf,
    canonical: String,
}

fn get<T: FromStr>(map: &BTreeMap<&'static str, String>, key: &'static str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let value = &map[key];
    value.parse().map_err(|e: T::Err| ConfigError::Invalid { key, value: value.clone(), reason: e.to_string() })
}

fn list<T: FromStr>(map: &BTreeMap<&'static str, String>, key: &'static str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let value = &map[key];
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: T::Err| ConfigError::Invalid { key, value: value.clone(), reason: e.to_string() }))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<&'static str, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let k = k.trim();
            let key = REQUIRED
                .iter()
                .copied()
                .chain(OPTIONAL.iter().map(|(k, _)| *k))
                .find(|known| *known == k)
                .ok_or_else(|| ConfigError::UnknownKey { line: i + 1, key: k.to_string() })?;
            if map.insert(key, v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k.to_string() });
            }
        }
        for &key in REQUIRED {
            if !map.contains_key(key) {
                return Err(ConfigError::Missing(key));
            }
        }
        for &(key, default) in OPTIONAL {
            map.entry(key).or_insert_with(|| default.to_string());
        }
        let canonical: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let dataset = match map["dataset"].as_str() {
            "mnist" => DatasetKind::Mnist,
            "synthetic" => DatasetKind::Synthetic,
            other => {
                return Err(ConfigError::Invalid { key: "dataset", value: other.into(), reason: "expected mnist or synthetic".into() })
            }
        };
        let parameterization = match map["parameterization"].as_str() {
            "mean-var" => Parameterization::MeanVar,
            "mean-kl" => Parameterization::MeanKL,
            other => {
                return Err(ConfigError::Invalid {
                    key: "parameterization",
                    value: other.into(),
                    reason: "expected mean-var or mean-kl".into(),
                })
            }
        };
        let cfg = Self {
            dataset,
            data_dir: PathBuf::from(&map["data_dir"]),
            downsample: get(&map, "downsample")?,
            train_limit: get(&map, "train_limit")?,
            test_limit: get(&map, "test_limit")?,
            synthetic_points: get(&map, "synthetic_points")?,
            synthetic_classes: get(&map, "synthetic_classes")?,
            synthetic_dim: get(&map, "synthetic_dim")?,
            layers: list(&map, "layers")?,
            bias: get(&map, "bias")?,
            parameterization,
            block_size: get(&map, "block_size")?,
            budget_bits: get(&map, "budget_bits")?,
            max_iters: get(&map, "max_iters")?,
            learning_rate: get(&map, "learning_rate")?,
            batch_size: get(&map, "batch_size")?,
            eps_beta0: get(&map, "eps_beta0")?,
            eps_beta: get(&map, "eps_beta")?,
            finetune_steps: get(&map, "finetune_steps")?,
            seed: get(&map, "seed")?,
            seeds: list(&map, "seeds")?,
            repro_block_sizes: list(&map, "repro_block_sizes")?,
            output_dir: PathBuf::from(&map["output_dir"]),
            canonical,
        };
        if cfg.layers.len() < 2 {
            return Err(ConfigError::Invalid {
                key: "layers",
                value: map["layers"].clone(),
                reason: "need at least input and output sizes".into(),
            });
        }
        Ok(cfg)
    }

    /// SHA-256 of the normalised `key=value` listing (defaults filled in),
    /// first 16 hex digits.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical.as_bytes()))[..16].to_string()
    }

    pub fn model_spec(&self) -> Result<ModelSpec, crate::nn::ModelError> {
        ModelSpec::mlp(&self.layers, self.bias)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            budget_bits_per_block: self.budget_bits,
            block_size: self.block_size,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_iters: self.max_iters,
            eps_beta0: self.eps_beta0,
            eps_beta: self.eps_beta,
            finetune_steps: self.finetune_steps,
            seed: self.seed,
            parameterization: self.parameterization,
            lambert: Evaluation::Refined,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "dataset = synthetic\nlayers = 16,8,10\nparameterization = mean-kl\nblock_size = 10\nbudget_bits = 10\nmax_iters = 100\n";

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.layers, vec![16, 8, 10]);
        assert_eq!(c.parameterization, Parameterization::MeanKL);
        assert_eq!(c.batch_size, 200);
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert!(c.repro_block_sizes.is_empty());
        assert_eq!(c.train_config().eps_beta, 5e-5);
    }

    #[test]
    fn rejects_unknown_duplicate_and_missing() {
        let e = RunConfig::parse(&format!("{BASE}colour = red\n")).unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { line: 7, key: "colour".into() });
        let e = RunConfig::parse(&format!("{BASE}seed = 1\nseed = 2\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Duplicate { .. }));
        let e = RunConfig::parse(&BASE.replace("block_size = 10\n", "")).unwrap_err();
        assert_eq!(e, ConfigError::Missing("block_size"));
        assert!(e.to_string().contains("block_size"));
        let e = RunConfig::parse(&BASE.replace("= 10\nmax", "= ten\nmax")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { key: "budget_bits", .. }));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn hash_ignores_layout_but_not_values() {
        let a = RunConfig::parse(BASE).unwrap();
        let shuffled: String = BASE.lines().rev().map(|l| format!("  {l}\n# note\n")).collect();
        assert_eq!(a.hash(), RunConfig::parse(&shuffled).unwrap().hash());
        let b = RunConfig::parse(&format!("{BASE}seed = 3\n")).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
