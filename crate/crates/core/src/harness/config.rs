//! Run configuration.
//!
//! Config files are flat `section.key = value` lines (TOML syntax, so strings
//! are quoted and lists use brackets). Settings are layered: preset defaults,
//! then the file, then `--set section.key=value` overrides, then dedicated
//! command-line flags. Relative paths are taken relative to the working
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adapt::AdaptConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, ProtocolSpec};
use crate::model::{ModelConfig, Preset};
use crate::pretrain::PretrainConfig;

/// Manifests used by the single-stage commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain_manifest: Option<PathBuf>,
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub eval_manifests: Vec<PathBuf>,
    /// Fraction of target videos placed in the unlabelled pool.
    pub target_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_manifest: None,
            source_manifest: None,
            target_manifest: None,
            eval_manifests: Vec::new(),
            target_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub data: DataConfig,
    pub eval: EvalSettings,
    /// Synthetic datasets rendered by `synth` into `out_dir/data/<name>`.
    pub datasets: Vec<SyntheticSpec>,
    pub protocol: ProtocolSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::default())
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::preset(preset),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            data: DataConfig::default(),
            eval: EvalSettings::default(),
            datasets: Vec::new(),
            protocol: ProtocolSpec::default(),
        }
    }

    /// Resolves a config from an optional file and `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
            set_dotted(&mut user, key.trim(), parse_value(raw.trim()))?;
        }
        let preset = match user.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Preset::default(),
        };
        let mut merged = Table::try_from(Self::for_preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if !(0.0..=1.0).contains(&self.data.target_ratio) {
            return Err(Error::Config(format!("data.target_ratio {} outside [0, 1]", self.data.target_ratio)));
        }
        if self.eval.n_eval_clips == 0 {
            return Err(Error::Config("eval.n_eval_clips must be positive".into()));
        }
        for d in &self.datasets {
            d.validate()?;
        }
        Ok(())
    }

    /// Every setting as one `section.key = value` line, sorted by key.
    pub fn to_flat_text(&self) -> String {
        let table = Table::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn parse_value(raw: &str) -> Value {
    // Anything that is not a TOML literal is taken as a bare string.
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{key:?}: {p} is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) if !t.is_empty() => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}
