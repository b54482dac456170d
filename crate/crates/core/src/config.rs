//! Run configuration files.
//!
//! A TOML document with a top-level `seed`, `preset` (`toy` or `paper`), optional `rules_file`
//! / `flip_file`, and `[net]`, `[train]`, `[data]` sections. Section keys override the preset;
//! `key=value` overrides (dotted paths such as `net.lambda3=2`) override the file. Unknown keys
//! are rejected. The top-level seed is copied into `net.seed` and `train.seed` unless those are
//! set explicitly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attention::RuleTable;
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::training::{FlipTable, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest.
    pub train: Option<PathBuf>,
    /// Evaluation manifest.
    pub eval: Option<PathBuf>,
    /// Labels at or above this value count as present.
    pub label_threshold: f64,
    /// Abort on the first malformed manifest record.
    pub fail_fast: bool,
    pub eval_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            eval: None,
            label_threshold: 1.0,
            fail_fast: false,
            eval_batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub rules_file: Option<PathBuf>,
    pub flip_file: Option<PathBuf>,
    pub net: NetConfig,
    pub train: TrainSchedule,
    pub data: DataConfig,
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("configuration types serialize to TOML tables")
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

/// Sets `path` (dot separated; numeric parts index arrays) inside `table`.
fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let bad = || Error::Config(format!("bad override key '{path}'"));
    let mut parts = path.split('.');
    let first = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
    let mut slot = table
        .entry(first.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    for p in parts {
        if p.is_empty() {
            return Err(bad());
        }
        slot = match slot {
            Value::Table(t) => t
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let n = a.len();
                let i: usize = p
                    .parse()
                    .map_err(|_| Error::Config(format!("'{p}' in '{path}' is not an index")))?;
                a.get_mut(i).ok_or_else(|| {
                    Error::Config(format!("index {i} in '{path}' is out of range (len {n})"))
                })?
            }
            _ => return Err(Error::Config(format!("'{path}' descends into a scalar"))),
        };
    }
    *slot = value;
    Ok(())
}

impl RunConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (mut net, mut train) = match preset {
            Preset::Toy => (NetConfig::toy(), TrainSchedule::toy()),
            Preset::Paper => (NetConfig::paper(), TrainSchedule::paper()),
        };
        net.seed = seed;
        train.seed = seed;
        RunConfig {
            seed,
            preset,
            rules_file: None,
            flip_file: None,
            net,
            train,
            data: DataConfig::default(),
        }
    }

    /// Builds the effective configuration from optional file text and `key=value` overrides.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match text {
            Some(t) => t
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => Table::new(),
        };
        let mut sets = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let (k, v) = (k.trim(), parse_value(v.trim()));
            // Top-level keys steer preset selection, so they land in the user table first.
            if !k.contains('.') {
                set_path(&mut user, k, v.clone())?;
            }
            sets.push((k, v));
        }
        let preset: Preset = match user.get("preset") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let seed = match user.get("seed") {
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(v) => {
                return Err(Error::Config(format!(
                    "seed must be a non-negative integer, got {v}"
                )))
            }
            None => 0,
        };
        let mut base = to_table(&Self::preset(preset, seed));
        // Rule tables come from the preset or `rules_file`, never merged element-wise.
        if let Some(Value::Table(net)) = user.get("net") {
            if net.contains_key("au_rules") {
                if let Some(Value::Table(b)) = base.get_mut("net") {
                    b.remove("au_rules");
                }
            }
        }
        merge(&mut base, user);
        for (k, v) in sets {
            set_path(&mut base, k, v)?;
        }
        let mut cfg: RunConfig = Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(path) = &cfg.rules_file {
            cfg.net.au_rules = RuleTable::load(path)?;
        }
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn flip_table(&self) -> Result<FlipTable> {
        match (&self.flip_file, self.preset) {
            (Some(p), _) => FlipTable::load(p),
            (None, Preset::Toy) => Ok(FlipTable::toy()),
            (None, Preset::Paper) => Ok(FlipTable::default_49()),
        }
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_to_toy() {
        let c = RunConfig::from_sources(None, &[]).unwrap();
        assert_eq!(c.net, NetConfig::toy());
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 5\n[net]\nlambda3 = 3.0\n";
        let c = RunConfig::from_sources(
            Some(text),
            &["net.lambda3=4".into(), "train.batch_size=2".into()],
        )
        .unwrap();
        assert_eq!(c.net.lambda3, 4.0);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!((c.net.seed, c.train.seed), (5, 5));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_sources(Some("[net]\nbogus = 1\n"), &[]).is_err());
        assert!(RunConfig::from_sources(None, &["nope=1".into()]).is_err());
        assert!(RunConfig::from_sources(None, &["net.l=33".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::from_sources(
            Some("preset = \"paper\"\n"),
            &["train.stages.1.epochs=1".into()],
        )
        .unwrap();
        assert_eq!(c.train.stages[1].epochs, 1);
        assert_eq!(
            c.train.stages[0].epochs,
            TrainSchedule::paper().stages[0].epochs
        );
        assert!(RunConfig::from_sources(None, &["train.stages.9.epochs=1".into()]).is_err());
        let again = RunConfig::from_sources(Some(&c.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(c, again);
    }
}
