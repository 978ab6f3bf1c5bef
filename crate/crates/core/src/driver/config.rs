//! Run configuration: one TOML document, dotted overrides, one seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analysis::toy::ToyCorpusConfig;
use crate::analysis::{ProbeOptions, SweepOptions};
use crate::error::{Error, Result};
use crate::features::MelParams;
use crate::model::ModelConfig;
use crate::seed::sub_seed;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub heldout_fraction: f64,
    pub eval_samples: usize,
    pub retry: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let o = SweepOptions::default();
        SweepConfig {
            betas: vec![0.5, 1.0, 4.0],
            heldout_fraction: o.heldout_fraction,
            eval_samples: o.eval_samples,
            retry: o.retry,
        }
    }
}

impl SweepConfig {
    pub fn options(&self) -> SweepOptions {
        SweepOptions {
            heldout_fraction: self.heldout_fraction,
            eval_samples: self.eval_samples,
            retry: self.retry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// The large run converts twice this many segments.
    pub segments: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { segments: 10, repeats: 5 }
    }
}

/// Everything a subcommand needs. Component seeds are not set directly;
/// they derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mel: MelParams,
    pub sweep: SweepConfig,
    pub probe: ProbeOptions,
    pub bench: BenchConfig,
    pub toy: ToyCorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            mel: MelParams::default(),
            sweep: SweepConfig::default(),
            probe: ProbeOptions::default(),
            bench: BenchConfig::default(),
            toy: ToyCorpusConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

const DERIVED_SEEDS: [&str; 3] = ["train", "probe", "toy"];

impl RunConfig {
    fn derive_seeds(&mut self) {
        self.train.seed = sub_seed(self.seed, "train");
        self.probe.seed = sub_seed(self.seed, "probe");
        self.toy.seed = sub_seed(self.seed, "toy");
    }

    pub fn model_init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    /// Builds the config from an optional file, `key=value` overrides and
    /// an optional seed, rejecting unknown keys.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for section in DERIVED_SEEDS {
            if table.get(section).and_then(Value::as_table).is_some_and(|t| t.contains_key("seed")) {
                return Err(Error::config(format!(
                    "`{section}.seed` cannot be set; use the top-level `seed` or --seed"
                )));
            }
        }
        if let Some(s) = seed {
            table.insert("seed".into(), Value::Integer(s as i64));
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mel.validate()?;
        if self.bench.segments == 0 || self.bench.repeats == 0 {
            return Err(Error::config("bench needs segments and repeats >= 1"));
        }
        Ok(())
    }

    /// TOML that [`RunConfig::resolve`] reads back to the same config.
    /// Derived seeds are left out since they follow from `seed`.
    pub fn to_toml(&self) -> Result<String> {
        let mut plain = self.clone();
        plain.train.seed = 0;
        plain.probe.seed = 0;
        plain.toy.seed = 0;
        let mut v = Value::try_from(&plain).map_err(|e| Error::config(e.to_string()))?;
        let t = v.as_table_mut().expect("struct serializes to a table");
        for section in DERIVED_SEEDS {
            if let Some(sec) = t.get_mut(section).and_then(Value::as_table_mut) {
                sec.remove("seed");
            }
        }
        toml::to_string(&v).map_err(|e| Error::config(e.to_string()))
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG);
        fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))
    }
}

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, text).unwrap();
        let back = RunConfig::resolve(Some(&p), &[], None).unwrap();
        assert_eq!(back, c);

        let seeded = RunConfig::resolve(None, &["train.epochs=2".into()], Some(77)).unwrap();
        fs::write(&p, seeded.to_toml().unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[], None).unwrap(), seeded);
    }

    #[test]
    fn overrides_are_typed_and_dotted() {
        let c = RunConfig::resolve(
            None,
            &[
                "train.epochs=3".into(),
                "model.split=2".into(),
                "sweep.betas=[1.0, 2.0]".into(),
                "train.schedule=constant".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.split, 2);
        assert_eq!(c.sweep.betas, [1.0, 2.0]);
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, sub_seed(9, "train"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in ["train.epoch=3", "nope=1", "model.split=99", "train.seed=4", "train=1", "x"] {
            let r = RunConfig::resolve(None, &[bad.to_string()], None);
            assert!(matches!(r, Err(Error::Config(_))), "{bad}: {r:?}");
        }
    }
}
