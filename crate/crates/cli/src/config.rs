//! Run configuration: one JSON document plus dotted `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use canet::data::{LabelMap, SynthSpec};
use canet::model::{AblationFlags, BackboneConfig, ModelConfig, NetworkSpec};
use canet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    One(f64),
    Sweep(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV manifest with `filename,grade_a,grade_b`. Without one, a
    /// synthetic set of `synth_count` images is generated from `synth`.
    pub manifest: Option<PathBuf>,
    pub label_map: LabelMap,
    pub synth_count: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Train `k` models on a stratified k-fold split and report means.
    pub kfold: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            label_map: LabelMap::BinaryDr,
            synth_count: 2000,
            val_fraction: 0.15,
            test_fraction: 0.15,
            kfold: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub ablation: AblationFlags,
    /// Overrides `train.lambda`; a list runs one training per value.
    pub lambda: Option<Lambda>,
    /// Overrides `train.seed`. Falls back to `CANET_SEED` when absent.
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `--set key=value`
    /// pairs and resolves the seed.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| UsageError(format!("config: {e}")))?;
        if cfg.seed.is_none() {
            if let Ok(v) = std::env::var("CANET_SEED") {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| UsageError(format!("CANET_SEED `{v}` is not an unsigned integer")))?;
                cfg.seed = Some(seed);
            }
        }
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match &self.lambda {
            None => vec![self.train.lambda],
            Some(Lambda::One(l)) => vec![*l],
            Some(Lambda::Sweep(v)) => v.clone(),
        }
    }

    /// Network for the ablation flags. Flag conflicts are usage errors.
    pub fn network(&self) -> Result<NetworkSpec> {
        let variant = self.ablation.variant()?;
        Ok(NetworkSpec {
            model: self.model.clone(),
            backbone: self.backbone.clone(),
            variant,
        })
    }
}

/// `a.b.c=value`. The value is parsed as JSON when possible, otherwise
/// taken as a string.
fn apply_set(doc: &mut Value, set: &str) -> Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!(UsageError(format!("--set expects key=value, got `{set}`")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!(UsageError(format!("empty path segment in `{key}`")));
        }
        let Value::Object(map) = node else {
            bail!(UsageError(format!("`{}` is not a section", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
