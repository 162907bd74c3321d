//! Run configuration: one JSON document covering paths and every stage's
//! hyperparameters. Values resolve as `--set` override > file > default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CvseError, Result};
use crate::graph::GraphConfig;
use crate::model::ModelConfig;
use crate::numeric::AdamConfig;
use crate::objective::LossWeights;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub q: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { q: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch (1-based) trained at `lr`.
    pub lr_decay_epoch: usize,
    pub lr_after_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Share of images held out for per-epoch validation; 0 validates on the training split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 128,
            epochs: 30,
            lr: 2e-4,
            lr_decay_epoch: 15,
            lr_after_decay: 2e-5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_after_decay
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Neighbours per view in concept prediction.
    pub k: usize,
    /// Use predicted concept labels for text queries.
    pub predict_concepts: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { k: 3, predict_concepts: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

fn config_err(key: &str, msg: impl Into<String>) -> CvseError {
    CvseError::Config { key: key.to_owned(), msg: msg.into() }
}

/// Recursively overlays `src` on `dst`, rejecting keys absent from `dst`.
fn merge(dst: &mut Value, src: &Value, prefix: &str) -> Result<()> {
    let Value::Object(src) = src else {
        return Err(config_err(if prefix.is_empty() { "<root>" } else { prefix }, "expected an object"));
    };
    let Value::Object(dst) = dst else { unreachable!("defaults are objects at every nesting level") };
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst.get_mut(k).ok_or_else(|| config_err(&key, "unknown key"))?;
        if slot.is_object() {
            merge(slot, v, &key)?;
        } else {
            *slot = v.clone();
        }
    }
    Ok(())
}

/// Sets a dotted key; the value is parsed as JSON and falls back to a plain string.
fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| config_err(key, "unknown key"))?;
    }
    if slot.is_object() {
        return Err(config_err(key, "cannot override a whole section"));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

/// Parses `KEY=VALUE`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(s, "override must look like KEY=VALUE"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

fn deserialize_err(e: serde_json::Error) -> CvseError {
    // serde reports the innermost field only; surface its message verbatim
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<root>".into());
    config_err(&key, msg)
}

impl RunConfig {
    /// Resolves defaults, an optional config file and dotted overrides.
    /// Relative paths in the file are taken relative to the file's directory.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CvseError::io(path, e))?;
            let parsed: Value = serde_json::from_str(&text).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
            merge(&mut value, &parsed, "")?;
            if let Some(base) = path.parent() {
                rebase_paths(&mut value, base);
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut value, k, v)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(deserialize_err)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(config_err("train.batch_size", "must be at least 2"));
        }
        if t.lr_decay_epoch > t.epochs {
            return Err(config_err("train.lr_decay_epoch", "must not exceed train.epochs"));
        }
        if !(t.lr >= 0.0) || !(t.lr_after_decay >= 0.0) {
            return Err(config_err("train.lr", "learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(config_err("train.val_fraction", "must lie in [0, 1)"));
        }
        if self.vocab.q == 0 {
            return Err(config_err("vocab.q", "must be positive"));
        }
        let g = &self.graph;
        if !(g.s > 1.0) {
            return Err(config_err("graph.s", "must exceed 1"));
        }
        if !(0.0..=1.0).contains(&g.u) {
            return Err(config_err("graph.u", "must lie in [0, 1]"));
        }
        if !g.epsilon.is_finite() {
            return Err(config_err("graph.epsilon", "must be finite"));
        }
        if g.gcn_hidden.contains(&0) {
            return Err(config_err("graph.gcn_hidden", "layer widths must be positive"));
        }
        let m = &self.model;
        for (key, v) in [("model.alpha", m.alpha), ("model.beta", m.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(key, "must lie in [0, 1]"));
            }
        }
        if !(m.lambda > 0.0) {
            return Err(config_err("model.lambda", "must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(config_err("model.dropout", "must lie in [0, 1)"));
        }
        if m.d == 0 || m.word_dim == 0 {
            return Err(config_err("model.d", "widths must be positive"));
        }
        self.loss.validate().map_err(|e| config_err("loss", e.to_string()))?;
        if self.inference.k == 0 {
            return Err(config_err("inference.k", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().ok_or_else(|| config_err(key, "required for this command"))
    }
}

/// Joins relative entries of the `paths` section onto `base`. Applied to
/// file values only, so command-line paths stay relative to the caller.
fn rebase_paths(root: &mut Value, base: &Path) {
    let Some(Value::Object(paths)) = root.get_mut("paths") else { return };
    for v in paths.values_mut() {
        if let Value::String(p) = v {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
    }
}
