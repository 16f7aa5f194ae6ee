//! Run configuration: defaults, a JSON file, then dotted command-line
//! overrides, later layers winning.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::ViewGeometry;
use crate::downstream::DownstreamConfig;
use crate::heads::HeadsConfig;
use crate::losses::LossConfig;
use crate::pretrain::OptimConfig;
use crate::radiomics::DEFAULT_LEVELS;
use crate::swin::SwinConfig;
use crate::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Gray levels used when recomputing texture targets.
    pub radiomics_levels: usize,
    /// Z-score morphology and texture targets over the training corpus.
    pub standardize_targets: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            radiomics_levels: DEFAULT_LEVELS,
            standardize_targets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: SwinConfig,
    pub heads: HeadsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: ViewGeometry,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub optim: OptimConfig,
    pub downstream: DownstreamConfig,
    pub runtime: RuntimeConfig,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            augment: ViewGeometry::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            optim: OptimConfig::default(),
            downstream: DownstreamConfig::default(),
            runtime: RuntimeConfig::default(),
            seed: 0,
            output_dir: "run".into(),
        }
    }
}

impl RunConfig {
    /// CPU-scale settings: 32^3 views, 12-channel encoder, phantoms with
    /// `num_regions` regions.
    pub fn toy(num_regions: usize) -> Self {
        Self {
            augment: ViewGeometry::toy(),
            model: ModelConfig {
                encoder: SwinConfig::toy(),
                heads: HeadsConfig::for_phantoms(num_regions),
            },
            optim: OptimConfig::toy(),
            downstream: DownstreamConfig::toy(),
            ..Self::default()
        }
    }

    /// Smallest consistent settings: 16^3 views and a two-stage 6-channel
    /// encoder. Meant for smoke runs and tests on phantoms of side 32.
    pub fn tiny(num_regions: usize) -> Self {
        let mut c = Self::toy(num_regions);
        c.augment = ViewGeometry {
            global_size: 16,
            local_crop: 12,
            local_size: 16,
            sub_patch_size: 4,
            max_gap: 2,
            location_input_size: 16,
            ..ViewGeometry::toy()
        };
        c.model.encoder = SwinConfig {
            embed_dim: 6,
            depths: vec![1, 1],
            num_heads: vec![3, 6],
            contrastive_dim: 16,
            ..SwinConfig::toy()
        };
        c.optim.warmup_steps = 10;
        c.optim.total_epochs = 20;
        c.downstream.epochs = 10;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.model.encoder.validate()?;
        self.model.heads.validate()?;
        self.losses.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate()?;
        self.downstream.validate()?;
        let f = self.model.encoder.downsample();
        for (name, s) in [
            ("augment.global_size", self.augment.global_size),
            ("augment.local_size", self.augment.local_size),
            ("augment.location_input_size", self.augment.location_input_size),
        ] {
            if s % f != 0 {
                return Err(Error::Config(format!("{name} = {s} is not a multiple of the encoder downsampling {f}")));
            }
        }
        Ok(())
    }

    /// Layers `file` (a JSON object) and then `overrides` (dotted key, value)
    /// on top of `base`. Override values are parsed as JSON, falling back to a
    /// plain string.
    pub fn resolve(base: &RunConfig, file: Option<&Value>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(base)?;
        if let Some(layer) = file {
            if !layer.is_object() {
                return Err(Error::Config("configuration file must hold a JSON object".into()));
            }
            merge(&mut tree, layer, "")?;
        }
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut layer = value;
            for part in key.split('.').rev() {
                let mut m = serde_json::Map::new();
                m.insert(part.to_string(), layer);
                layer = Value::Object(m);
            }
            merge(&mut tree, &layer, "")?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &RunConfig, path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let file = match path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                let text = String::from_utf8_lossy(&bytes);
                if text.trim().is_empty() {
                    None
                } else {
                    Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
                }
            }
            None => None,
        };
        Self::resolve(base, file.as_ref(), overrides)
    }

    /// Writes the full resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_u64() => "unsigned integer",
        Value::Number(n) if n.is_i64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(default: &Value, new: &Value) -> bool {
    match (default, new) {
        (Value::Null, _) => true,
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Number(d), Value::Number(n)) => {
            if d.is_u64() {
                n.is_u64()
            } else if d.is_i64() {
                n.is_i64()
            } else {
                true
            }
        }
        (Value::Array(d), Value::Array(n)) => match d.first() {
            Some(d0) => n.iter().all(|x| compatible(d0, x)),
            None => true,
        },
        (Value::Object(_), Value::Object(_)) => true,
        _ => false,
    }
}

fn merge(dst: &mut Value, layer: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(l)) = (&mut *dst, layer) else {
        unreachable!("merge is only called on objects");
    };
    for (k, v) in l {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = d.get_mut(k) else {
            return Err(Error::Config(format!("unknown key {path}")));
        };
        if slot.is_object() && v.is_object() {
            merge(slot, v, &path)?;
        } else if compatible(slot, v) {
            *slot = v.clone();
        } else {
            return Err(Error::Config(format!("key {path} expects {}, got {}", kind(slot), kind(v))));
        }
    }
    Ok(())
}
