use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EnergyConstants;
use crate::model::ModelConfig;
use crate::pruning::{PruneSchedule, ScorerConfig};
use crate::search::SearchSpace;
use crate::training::{SyntheticSpec, TrainConfig};

pub const SEED_ENV: &str = "SPIKEPRUNE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: SyntheticSpec,
    pub eval: SyntheticSpec,
    /// Held-out batch used by the ratio search.
    pub search: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: SyntheticSpec::default(),
            eval: SyntheticSpec {
                count: 128,
                seed: 2,
                ..Default::default()
            },
            search: SyntheticSpec {
                count: 64,
                seed: 3,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub weights: Option<String>,
    /// Directory holding `train`/`eval`/`search` splits written by `gen-data`.
    pub data: Option<String>,
    pub reports: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scorer: ScorerConfig,
    /// `"none"` or a list of per-block retention ratios.
    #[serde(serialize_with = "ser_schedule", deserialize_with = "de_schedule")]
    pub schedule: Option<PruneSchedule>,
    pub train: TrainConfig,
    pub search: SearchSpace,
    pub data: DataConfig,
    pub energy: EnergyConstants,
    pub paths: Paths,
}


fn ser_schedule<S: Serializer>(v: &Option<PruneSchedule>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_str("none"),
        Some(p) => p.serialize(s),
    }
}

fn de_schedule<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<PruneSchedule>, D::Error> {
    parse_schedule_value(&serde_json::Value::deserialize(d)?).map_err(serde::de::Error::custom)
}

/// `"none"`, `null` or an array of ratios.
pub fn parse_schedule_value(v: &serde_json::Value) -> std::result::Result<Option<PruneSchedule>, String> {
    match v {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::String(s) if s == "none" => Ok(None),
        serde_json::Value::Array(items) => {
            let ratios = items
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| format!("schedule entry {x} is not a number")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            PruneSchedule::new(ratios).map(Some).map_err(|e| e.to_string())
        }
        other => Err(format!("expected \"none\" or a list of ratios, got {other}")),
    }
}

/// Parses a schedule given on the command line: `none`, a JSON array,
/// a comma- or semicolon-separated list, or a path to a JSON file holding
/// either an array or an object with a `schedule` or `best` field.
pub fn parse_schedule_arg(arg: &str) -> Result<Option<PruneSchedule>> {
    let t = arg.trim();
    if t == "none" {
        return Ok(None);
    }
    let bad = |d: String| Error::config("schedule", d);
    if t.starts_with('[') {
        let v: serde_json::Value = serde_json::from_str(t).map_err(|e| bad(e.to_string()))?;
        return parse_schedule_value(&v).map_err(bad);
    }
    if Path::new(t).is_file() {
        let text = std::fs::read_to_string(t)?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(format!("{t}: {e}")))?;
        let inner = match &v {
            serde_json::Value::Object(m) => m
                .get("schedule")
                .or_else(|| m.get("best"))
                .cloned()
                .ok_or_else(|| bad(format!("{t}: no `schedule` or `best` field")))?,
            _ => v,
        };
        return parse_schedule_value(&inner).map_err(bad);
    }
    let ratios = t
        .split([',', ';'])
        .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("`{p}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    PruneSchedule::new(ratios).map(Some)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scorer.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        self.energy
            .validate()
            .map_err(|e| Error::config("energy", e.to_string()))?;
        for (key, spec) in [
            ("data.train", &self.data.train),
            ("data.eval", &self.data.eval),
            ("data.search", &self.data.search),
        ] {
            spec.validate().map_err(|e| Error::config(key, e.to_string()))?;
            if spec.height != self.model.input_height || spec.width != self.model.input_width {
                return Err(Error::config(
                    key,
                    format!(
                        "{}x{} images for a {}x{} model",
                        spec.height, spec.width, self.model.input_height, self.model.input_width
                    ),
                ));
            }
        }
        if (self.model.input_channels != 1 || self.model.num_classes != 2)
            && self.paths.data.is_none() {
                return Err(Error::config(
                    "model.num_classes",
                    "synthetic data is single-channel two-class; set paths.data for other shapes",
                ));
            }
        let blocks = self.model.num_blocks;
        for (key, s) in [("schedule", &self.schedule), ("train.schedule", &self.train.schedule)] {
            if let Some(s) = s {
                if s.len() != blocks {
                    return Err(Error::config(
                        key,
                        format!("{} ratios for a {blocks}-block model", s.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::config(SEED_ENV, format!("`{v}`: {e}")))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let key = match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(field) if path == "." => field.to_string(),
            _ => path,
        };
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses, validates and applies the environment seed override.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    let mut cfg = parse_config(&text)?;
    cfg.apply_env()?;
    Ok(cfg)
}
