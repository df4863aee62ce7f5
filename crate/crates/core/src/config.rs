//! Run configuration: one TOML document with a section per module, plus
//! command-line style `a.b.c=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::matching::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SceneConfig;
use crate::temporal::FusionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load an existing dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    pub sequences: usize,
    pub frames: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            sequences: 20,
            frames: 1,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Frames per training clip; earlier frames only fill the temporal memory.
    pub clip_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 2,
            max_steps: None,
            checkpoint_every: 0,
            clip_len: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and the data order.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Where artifacts are written.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            fusion: FusionConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let de = toml::Value::Table(table);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.fusion.validate()?;
        self.eval_config().validate()?;
        if self.train.batch_size == 0 || self.train.clip_len == 0 {
            return Err(Error::Config(
                "train.batch_size and train.clip_len must be at least 1".into(),
            ));
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            return Err(Error::Config(
                "optim.lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.data.dataset.is_none() && (self.data.sequences == 0 || self.data.frames == 0) {
            return Err(Error::Config(
                "data.sequences and data.frames must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Evaluation settings on the data's world box.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            world: self.data.scene.world,
            ..self.eval.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Resolved configuration echoed into artifacts; the output location is left out so
    /// that identical runs written to different places produce identical files.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = self.to_json();
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        v
    }

    /// Applies `a.b.c=value` overrides to an existing configuration.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&table.to_string(), overrides)
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Dotted keys whose values differ between two JSON documents.
pub fn diff_keys(a: &serde_json::Value, b: &serde_json::Value, prefix: &str) -> Vec<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter()
                .flat_map(|k| {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    diff_keys(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p)
                })
                .collect()
        }
        _ if a == b => Vec::new(),
        _ => vec![prefix.to_string()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_toml_str(
            "[model]\nlayers = 3\n",
            &[
                "model.dim=32".into(),
                "fusion.variant=topk_query".into(),
                "optim.lr=1e-3".into(),
            ],
        )
        .unwrap();
        assert_eq!((cfg.model.layers, cfg.model.dim), (3, 32));
        assert_eq!(cfg.fusion.variant, crate::temporal::FusionVariant::TopkQuery);
        assert_eq!(cfg.optim.lr, 1e-3);
    }

    #[test]
    fn unknown_key_names_its_path() {
        match RunConfig::from_toml_str("[model]\nlayerz = 3\n", &[]) {
            Err(Error::Schema { path, message }) => {
                assert_eq!(path, "model.layerz");
                assert!(message.contains("layerz"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_toml_str("", &["train.batch_size=\"two\"".into()]) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "train.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_on_existing_config_round_trip() {
        let mut base = RunConfig::default();
        base.data.scene.lane_length = Some((20.0, 90.0));
        base.optim.grad_clip = Some(0.5);
        assert_eq!(base.with_overrides(&[]).unwrap(), base);
        let c = base.with_overrides(&["model.layers=2".into()]).unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.data.scene.lane_length, Some((20.0, 90.0)));
    }

    #[test]
    fn diff_lists_changed_leaves() {
        let a = RunConfig::default().to_json();
        let mut c = RunConfig::default();
        c.model.dim = 32;
        c.optim.lr = 1.0;
        assert_eq!(diff_keys(&a, &c.to_json(), ""), vec!["model.dim", "optim.lr"]);
    }
}
