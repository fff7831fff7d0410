//! Run configuration: a named preset overlaid with a TOML document and `--set` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metacl::augment::AugmentConfig;
use metacl::digest::config_digest;
use metacl::evaluation::{FinetuneConfig, FinetuneMode, DEFAULT_SUBSET_COUNT};
use metacl::relations::{MaxGap, RelationConfig};
use metacl::schedule::CadenceTable;
use metacl::synth::SynthConfig;
use metacl::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub count: usize,
    /// Finetuning seeds; binary tasks are always stratified.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub synth: SynthConfig,
    pub relation: RelationConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub subsets: SubsetPlan,
    pub split: SplitConfig,
}

pub const PRESETS: [&str; 2] = ["paper", "desk"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let split = SplitConfig { val_fraction: 0.15, test_fraction: 0.25, seed: 0 };
        let subsets = SubsetPlan { count: DEFAULT_SUBSET_COUNT, seeds: (0..5).collect() };
        let relation = RelationConfig { min_gap_years: 0.02, max_gap: MaxGap::Years(0.5) };
        match name {
            "paper" => Ok(Self {
                preset: name.into(),
                seed: 0,
                synth: SynthConfig { image_size: 256, ..SynthConfig::default() },
                relation,
                augment: AugmentConfig::default(),
                train: TrainConfig::reference(),
                finetune: FinetuneConfig { epochs: 500, ..FinetuneConfig::default() },
                subsets,
                split,
            }),
            "desk" => {
                let augment = AugmentConfig::desk(32);
                let mut train = TrainConfig::desk(augment.output_len(), 1_500);
                train.cadence = CadenceTable::reference(20);
                Ok(Self {
                    preset: name.into(),
                    seed: 0,
                    synth: SynthConfig::default(),
                    relation,
                    augment,
                    train,
                    finetune: FinetuneConfig { mode: FinetuneMode::LinearProbe, ..FinetuneConfig::default() },
                    subsets,
                    split,
                })
            }
            other => bail!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
        }
    }

    /// Preset named in `document` (or `default_preset`), overlaid with the document and then with `overrides`.
    pub fn resolve(default_preset: &str, document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut overlay: toml::Table = match document {
            Some(text) => toml::from_str(text).context("parsing configuration document")?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
            set_path(&mut overlay, key.trim(), parse_value(value.trim()))?;
        }
        let name = match overlay.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => bail!("`preset` must be a string"),
            None => default_preset.to_string(),
        };
        let base = Self::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).context("serializing preset")?;
        merge(&mut merged, overlay);
        let mut cfg: RunConfig = merged.try_into().context("invalid configuration")?;
        // The run seed is the single source of truth for pretraining.
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(default_preset: &str, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        Self::resolve(default_preset, text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.relation.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.subsets.count == 0 || self.subsets.seeds.is_empty() {
            bail!("the subset plan needs at least one size and one seed");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).with_context(|| format!("empty key in `{key}`"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{p}` in `{key}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
