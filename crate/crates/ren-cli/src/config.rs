//! Flat `key = value` run configuration with command-line overrides.
//!
//! A run config merges the model block, the training block, and paths.
//! Overrides given as `--key value` pairs win over the file. Unknown keys
//! are rejected, and every command writes its fully resolved config next
//! to its outputs.

use std::path::{Path, PathBuf};

use ren_core::data::{self, DataError};
use ren_core::geometry::AugmentRanges;
use ren_core::nn::ModelConfig;
use ren_core::train::{LossKind, TrainConfig};

use crate::CliError;

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "base_lr",
    "lr_step_epochs",
    "lr_factor",
    "total_epochs",
    "momentum",
    "weight_decay",
    "loss",
    "augment",
    "seed",
    "aug_translate",
    "aug_scale_lo",
    "aug_scale_hi",
    "aug_rotate",
    "aug_flip_prob",
    "checkpoint_every",
];

pub const PATH_KEYS: &[&str] = &["manifest", "eval_manifest", "out"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// `joints` appeared explicitly (otherwise it follows the manifest)
    pub joints_explicit: bool,
    /// periodic checkpoint interval in epochs; 0 disables
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            manifest: None,
            eval_manifest: None,
            out: None,
            joints_explicit: false,
            checkpoint_every: 0,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Splits trailing `--key value` override arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(key) = it.next() {
        let key = key
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("override '{key}' must look like --key value")))?;
        let value =
            it.next().ok_or_else(|| usage(format!("override --{key} is missing a value")))?;
        pairs.push((key.to_string(), value.clone()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Loads the file (when given), applies overrides, and parses.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            pairs.extend(text.lines().filter_map(data::parse_kv));
        }
        // later entries win
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        for (k, _) in pairs {
            let known = data::MODEL_CONFIG_KEYS.contains(&k.as_str())
                || TRAIN_KEYS.contains(&k.as_str())
                || PATH_KEYS.contains(&k.as_str());
            if !known {
                return Err(usage(format!("unknown config key '{k}'")));
            }
        }
        // last occurrence of each key wins
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let model_pairs: Vec<(String, String)> = data::MODEL_CONFIG_KEYS
            .iter()
            .filter_map(|&k| get(k).map(|v| (k.to_string(), v.to_string())))
            .collect();
        let model = data::model_config_from_pairs(&model_pairs)
            .map_err(|e| usage(format!("model config: {e}")))?;

        let mut cfg = RunConfig { model, joints_explicit: get("joints").is_some(), ..Default::default() };

        let fnum = |key: &str, v: &str| {
            v.parse::<f64>().map_err(|e| usage(format!("{key}: {e}")))
        };
        let inum = |key: &str, v: &str| {
            v.parse::<usize>().map_err(|e| usage(format!("{key}: {e}")))
        };
        let mut ranges = AugmentRanges::default();
        for &key in TRAIN_KEYS {
            let Some(v) = get(key) else { continue };
            match key {
                "batch_size" => cfg.train.batch_size = inum(key, v)?,
                "base_lr" => cfg.train.base_lr = fnum(key, v)?,
                "lr_step_epochs" => cfg.train.lr_step_epochs = inum(key, v)?,
                "lr_factor" => cfg.train.lr_factor = fnum(key, v)?,
                "total_epochs" => cfg.train.total_epochs = inum(key, v)?,
                "momentum" => cfg.train.momentum = fnum(key, v)?,
                "weight_decay" => cfg.train.weight_decay = fnum(key, v)?,
                "loss" => cfg.train.loss = LossKind::parse(v).map_err(|e| usage(e.to_string()))?,
                "augment" => {
                    cfg.train.augment = match v {
                        "on" | "true" | "1" => true,
                        "off" | "false" | "0" => false,
                        other => return Err(usage(format!("augment: '{other}' is not on/off"))),
                    }
                }
                "seed" => {
                    cfg.train.seed =
                        v.parse::<u64>().map_err(|e| usage(format!("seed: {e}")))?
                }
                "aug_translate" => {
                    let t = fnum(key, v)?;
                    ranges.translate_px = (-t, t);
                }
                "aug_scale_lo" => ranges.scale.0 = fnum(key, v)?,
                "aug_scale_hi" => ranges.scale.1 = fnum(key, v)?,
                "aug_rotate" => {
                    let r = fnum(key, v)?;
                    ranges.rotate_deg = (-r, r);
                }
                "aug_flip_prob" => ranges.flip_prob = fnum(key, v)?,
                "checkpoint_every" => cfg.checkpoint_every = inum(key, v)?,
                _ => unreachable!("key list is exhaustive"),
            }
        }
        cfg.train.augment_ranges = ranges;
        if let Some(v) = get("manifest") {
            cfg.manifest = Some(PathBuf::from(v));
        }
        if let Some(v) = get("eval_manifest") {
            cfg.eval_manifest = Some(PathBuf::from(v));
        }
        if let Some(v) = get("out") {
            cfg.out = Some(PathBuf::from(v));
        }
        cfg.train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Full key set, ready to be written next to run outputs.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in data::model_config_to_pairs(&self.model) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let t = &self.train;
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("base_lr = {}\n", t.base_lr));
        out.push_str(&format!("lr_step_epochs = {}\n", t.lr_step_epochs));
        out.push_str(&format!("lr_factor = {}\n", t.lr_factor));
        out.push_str(&format!("total_epochs = {}\n", t.total_epochs));
        out.push_str(&format!("momentum = {}\n", t.momentum));
        out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        out.push_str(&format!("loss = {}\n", t.loss.name()));
        out.push_str(&format!("augment = {}\n", if t.augment { "on" } else { "off" }));
        out.push_str(&format!("seed = {}\n", t.seed));
        out.push_str(&format!("aug_translate = {}\n", t.augment_ranges.translate_px.1));
        out.push_str(&format!("aug_scale_lo = {}\n", t.augment_ranges.scale.0));
        out.push_str(&format!("aug_scale_hi = {}\n", t.augment_ranges.scale.1));
        out.push_str(&format!("aug_rotate = {}\n", t.augment_ranges.rotate_deg.1));
        out.push_str(&format!("aug_flip_prob = {}\n", t.augment_ranges.flip_prob));
        out.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        if let Some(p) = &self.manifest {
            out.push_str(&format!("manifest = {}\n", p.display()));
        }
        if let Some(p) = &self.eval_manifest {
            out.push_str(&format!("eval_manifest = {}\n", p.display()));
        }
        if let Some(p) = &self.out {
            out.push_str(&format!("out = {}\n", p.display()));
        }
        out
    }
}

/// Maps data-layer failures to exit classes: malformed inputs are usage
/// errors, everything else is a runtime failure.
pub fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Io { .. }
        | DataError::Truncated { .. }
        | DataError::BadMagic { .. }
        | DataError::UnknownVersion(_)
        | DataError::ChecksumMismatch { .. }
        | DataError::Parse { .. }
        | DataError::UnknownKey(_)
        | DataError::MissingKey(_)
        | DataError::BadSpec(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}
