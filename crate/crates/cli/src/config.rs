//! Experiment configs: TOML with dotted section paths, `key=value`
//! overrides, path-qualified errors.

use std::fs;
use std::path::{Path, PathBuf};

use relcomm::metrics::{metric_registry, ProbeConfig};
use relcomm::refgame::{GameConfig, SimclrConfig};
use relcomm::scene::DatasetRegime;
use relcomm::transfer::{BaselineKind, TransferConfig};
use relcomm::Error;
use serde::{Deserialize, Serialize};

/// Which pipeline `run` executes for every seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Referential game per regime, then the configured metrics.
    Refgame,
    /// Contrastive encoder pretraining, then the game on frozen encoders.
    Simclr,
    /// Transfer conditions; Speaker checkpoints come from the config.
    Transfer,
    /// Refgame, SimCLR and transfer, with transfer reading this run's
    /// Random-regime Speakers.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub recipe: Recipe,
    pub regimes: Vec<DatasetRegime>,
    pub seeds: Vec<u64>,
    /// Applied to every generator section when the config is parsed.
    pub image_size: usize,
    pub metrics: Vec<String>,
    pub baselines: Vec<BaselineKind>,
    pub game: GameConfig,
    pub probe: ProbeConfig,
    pub simclr: SimclrConfig,
    pub transfer: TransferConfig,
    /// Root for run directories; falls back to `RELCOMM_RUNS_DIR`, then `runs`.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            name: "experiment".into(),
            recipe: Recipe::Refgame,
            regimes: DatasetRegime::ALL.to_vec(),
            seeds: vec![0],
            image_size: 128,
            metrics: vec!["accuracy".into(), "topsim".into(), "visual-probe".into(), "etl".into()],
            baselines: BaselineKind::ALL.to_vec(),
            game: GameConfig::default(),
            probe: ProbeConfig::default(),
            simclr: SimclrConfig::default(),
            transfer: TransferConfig::default(),
            out_dir: None,
        };
        cfg.apply_image_size();
        cfg
    }
}

impl ExperimentConfig {
    fn apply_image_size(&mut self) {
        self.game.generator.image_size = self.image_size;
        self.simclr.generator.image_size = self.image_size;
        self.transfer.generator.image_size = self.image_size;
    }

    pub fn validate(&self) -> Result<(), Error> {
        let cfg_err = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return cfg_err("name", "must be a plain directory name");
        }
        if self.seeds.is_empty() {
            return cfg_err("seeds", "need at least one seed");
        }
        if matches!(self.recipe, Recipe::Refgame | Recipe::Full) && self.regimes.is_empty() {
            return cfg_err("regimes", "need at least one regime");
        }
        if matches!(self.recipe, Recipe::Transfer | Recipe::Full) && self.baselines.is_empty() {
            return cfg_err("baselines", "need at least one baseline");
        }
        let registry = metric_registry();
        for m in &self.metrics {
            registry.get(m).map_err(|e| Error::Config { path: "metrics".into(), message: e.to_string() })?;
        }
        self.game.validate().map_err(|e| e.at("game"))?;
        self.probe.validate().map_err(|e| e.at("probe"))?;
        self.simclr.validate().map_err(|e| e.at("simclr"))?;
        self.transfer.validate().map_err(|e| e.at("transfer"))?;
        if self.recipe == Recipe::Full && self.transfer.generator.image_size != self.game.generator.image_size {
            return cfg_err("image_size", "transfer and game images must match");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::Config { path: "<input>".into(), message: e.message().trim().to_string() }
}

/// Splits `a.b.c=value` and parses `value` as a TOML value, falling back
/// to a bare string.
fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value), Error> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config { path: item.into(), message: "override must look like key=value".into() })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config { path: key.into(), message: "empty key segment".into() });
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), Error> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: path[..=i].join("."),
            message: "is a value, not a section".into(),
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Parses config text plus overrides into a validated config.
/// Unknown keys, type mismatches and out-of-range values are rejected
/// with the dotted path of the offending key.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let mut table: toml::Table = toml::from_str(text).map_err(toml_error)?;
    for item in overrides {
        let (path, value) = parse_override(item)?;
        set_path(&mut table, &path, value)?;
    }
    let top = table.get("image_size").cloned().unwrap_or(toml::Value::Integer(ExperimentConfig::default().image_size as i64));
    for section in ["game", "simclr", "transfer"] {
        let nested = table.get(section).and_then(|s| s.get("generator")).and_then(|g| g.get("image_size"));
        if nested.is_some_and(|v| *v != top) {
            return Err(Error::Config {
                path: format!("{section}.generator.image_size"),
                message: "differs from the top-level image_size, which applies to every section".into(),
            });
        }
    }
    let mut cfg: ExperimentConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let parent = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().trim().to_string();
            // Unknown keys are reported against their parent; name the key itself.
            let path = match message.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                Some(field) if parent == "." => field.to_string(),
                Some(field) if parent == field || parent.ends_with(&format!(".{field}")) => parent,
                Some(field) => format!("{parent}.{field}"),
                None => parent,
            };
            Error::Config { path, message }
        })?;
    cfg.apply_image_size();
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or starts from defaults) and applies `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config { path: p.display().to_string(), message: e.to_string() })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}
