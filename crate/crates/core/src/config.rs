//! Run configuration: TOML text plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synth_dataset, CorpusManifest, MattingSample, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
    /// Learning rate at the end of the cosine decay, relative to `lr`.
    pub final_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.02,
            final_lr_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest of a real corpus; the synthetic spec is used when absent.
    pub corpus: Option<PathBuf>,
    pub synth: SynthSpec,
    pub crop: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synth: SynthSpec::default(),
            crop: 64,
        }
    }
}

impl DataConfig {
    /// Samples from the manifest when one is configured, else the synthetic corpus.
    pub fn load_samples(&self, seed: u64) -> Result<Vec<MattingSample>> {
        match &self.corpus {
            Some(path) => {
                let manifest = CorpusManifest::read(path)?;
                let base = path.parent().unwrap_or(Path::new("."));
                manifest.load(base, seed)
            }
            None => synth_dataset(&self.synth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Worker threads for per-sample passes (0 = rayon default).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            seed: 0,
            checkpoint_every: 500,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(config_err(format!(
                "optim.lr {} must be finite and >= 0",
                o.lr
            )));
        }
        for (k, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(format!("optim.{k} {v} outside [0, 1)")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(config_err("optim.eps must be > 0"));
        }
        if !(0.0..1.0).contains(&o.warmup_frac) || !(0.0..=1.0).contains(&o.final_lr_frac) {
            return Err(config_err(
                "optim.warmup_frac must be in [0, 1) and final_lr_frac in [0, 1]",
            ));
        }
        let d = &self.data;
        if d.crop == 0 {
            return Err(config_err("data.crop must be positive"));
        }
        self.model
            .encoder
            .check_input(d.crop, d.crop)
            .map_err(|e| config_err(format!("data.crop: {e}")))?;
        if d.corpus.is_none() {
            if d.synth.count == 0 {
                return Err(config_err("data.synth.count must be positive"));
            }
            if d.synth.size < d.crop {
                return Err(config_err(format!(
                    "data.synth.size {} is smaller than data.crop {}",
                    d.synth.size, d.crop
                )));
            }
            if !d.synth.size.is_multiple_of(32) {
                return Err(config_err("data.synth.size must be a multiple of 32"));
            }
            if !(0.0..=1.0).contains(&d.synth.tt_ratio) {
                return Err(config_err("data.synth.tt_ratio outside [0, 1]"));
            }
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(config_err("train.batch must be positive"));
        }
        Ok(())
    }

    /// Parses TOML text, applies dotted `key=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err(format!("config parse: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // TOML literal when it parses as one, bare string otherwise
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
