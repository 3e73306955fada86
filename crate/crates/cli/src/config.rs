//! Flat dotted-key configuration.
//!
//! Every knob has a key such as `train.eta_s` or `world.grid_width`. Values
//! are resolved in three layers: built-in defaults, then a TOML file, then
//! command-line overrides. The resolved map is what manifests record.

use std::collections::BTreeMap;
use std::path::Path;

use foam_core::language::DatasetConfig;
use foam_core::trainer::TrainConfig;
use foam_core::world::{RouteBounds, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Dataset generation knobs that are not part of the world itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub train_routes_per_env: usize,
    pub val_routes_per_env: usize,
    pub annotations_per_route: usize,
    pub route_min_nodes: usize,
    pub route_max_nodes: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            train_routes_per_env: d.train_routes_per_env,
            val_routes_per_env: d.val_routes_per_env,
            annotations_per_route: d.annotations_per_route,
            route_min_nodes: d.bounds.min_nodes,
            route_max_nodes: d.bounds.max_nodes,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataSettings,
    pub train: TrainConfig,
    flat: BTreeMap<String, Value>,
}

/// Keys that change what pretraining computes.
pub const PRETRAIN_KEYS: &[&str] = &[
    "seed",
    "train.batch_labeled",
    "train.clip_norm",
    "train.divergence_factor",
    "train.divergence_window",
    "train.embed_dim",
    "train.hidden_dim",
    "train.max_steps",
    "train.pretrain_lr_f",
    "train.pretrain_lr_s",
    "train.pretrain_steps",
    "train.success_threshold",
    "train.validate_every",
];

fn section<T: Serialize>(prefix: &str, value: &T, out: &mut BTreeMap<String, Value>) {
    let Value::Object(map) = serde_json::to_value(value).expect("config sections serialize")
    else {
        unreachable!("config sections are structs")
    };
    for (k, v) in map {
        if k != "seed" {
            out.insert(format!("{prefix}.{k}"), v);
        }
    }
}

fn defaults() -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    out.insert("seed".into(), Value::from(0u64));
    section("world", &WorldConfig::default(), &mut out);
    section("data", &DataSettings::default(), &mut out);
    section("train", &TrainConfig::default(), &mut out);
    out
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) -> Result<(), CliError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => {
                let json = serde_json::to_value(other)
                    .map_err(|e| CliError::Config(format!("{key}: {e}")))?;
                out.push((key, json));
            }
        }
    }
    Ok(())
}

/// Parses `key=value`, reading the value as a TOML literal and falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))
            .map_err(|e| CliError::Config(format!("{key}: {e}")))?,
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn build<T: for<'de> Deserialize<'de>>(
    prefix: &str,
    flat: &BTreeMap<String, Value>,
    seed: Option<u64>,
) -> Result<T, CliError> {
    let mut map = Map::new();
    let dotted = format!("{prefix}.");
    for (k, v) in flat {
        if let Some(field) = k.strip_prefix(&dotted) {
            map.insert(field.to_string(), v.clone());
        }
    }
    if let Some(s) = seed {
        map.insert("seed".into(), Value::from(s));
    }
    serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::Config(format!("[{prefix}] {e}")))
}

impl Settings {
    /// Defaults, overlaid by `file` (if any), overlaid by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut flat = defaults();
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            flatten("", &table, &mut layers)?;
        }
        layers.extend(overrides.iter().cloned());
        for (k, v) in layers {
            if !flat.contains_key(&k) {
                return Err(CliError::Config(format!("unknown configuration key `{k}`")));
            }
            flat.insert(k, v);
        }
        Self::from_flat(flat)
    }

    pub fn from_flat(flat: BTreeMap<String, Value>) -> Result<Self, CliError> {
        let seed = flat
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| CliError::Config("seed must be a non-negative integer".into()))?;
        let world: WorldConfig = build("world", &flat, Some(seed))?;
        let data: DataSettings = build("data", &flat, None)?;
        let train: TrainConfig = build("train", &flat, Some(seed))?;
        Ok(Self {
            seed,
            world,
            data,
            train,
            flat,
        })
    }

    /// The resolved `key -> value` map.
    pub fn flat(&self) -> &BTreeMap<String, Value> {
        &self.flat
    }

    pub fn subset(&self, keys: &[&str]) -> BTreeMap<String, Value> {
        keys.iter()
            .filter_map(|&k| self.flat.get(k).map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            train_routes_per_env: self.data.train_routes_per_env,
            val_routes_per_env: self.data.val_routes_per_env,
            annotations_per_route: self.data.annotations_per_route,
            bounds: RouteBounds {
                min_nodes: self.data.route_min_nodes,
                max_nodes: self.data.route_max_nodes,
            },
        }
    }

    /// A copy with one more override applied.
    pub fn with(&self, key: &str, value: Value) -> Result<Self, CliError> {
        if !self.flat.contains_key(key) {
            return Err(CliError::Config(format!("unknown configuration key `{key}`")));
        }
        let mut flat = self.flat.clone();
        flat.insert(key.to_string(), value);
        Self::from_flat(flat)
    }

    /// The resolved configuration as flat dotted-key TOML.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.flat {
            let tv: toml::Value = serde_json::from_value(v.clone()).expect("json scalars map to toml");
            out.push_str(&format!("{k} = {tv}\n"));
        }
        out
    }
}
