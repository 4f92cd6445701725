//! Run configuration file (TOML).
//!
//! Every field has a default, so an empty file is the reference setup:
//! synthetic data, all four scenarios, all eight methods, seeds 0..3.
//!
//! ```toml
//! schema_version = 1
//! sizing = "full"          # or "fast"
//! scenarios = [1, 2]
//! methods = ["joint", "er", "proder"]
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! csv = "data/faults.csv"  # omit for synthetic data
//! train_fraction = 0.8
//! split_seed = 0
//!
//! [dataset.generator]
//! rows_per_cell = 276
//!
//! [strategy]               # applied on top of each scenario's defaults
//! proder_beta = 6.0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use proder_core::data::{GeneratorConfig, TRAIN_FRACTION};
use proder_core::replay::CAPACITY;
use proder_core::strategies::{Method, StrategyConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PRODER_OUT";
pub const DEFAULT_OUT: &str = "results";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizing {
    #[default]
    Full,
    /// Quarter of the synthetic rows, 15 epochs, buffer scaled by a quarter.
    Fast,
}

pub const FAST_EPOCHS: usize = 15;

impl Sizing {
    pub fn rows_per_cell(self, full: usize) -> usize {
        match self {
            Sizing::Full => full,
            Sizing::Fast => full / 4,
        }
    }

    pub fn apply(self, cfg: &mut StrategyConfig) {
        if self == Sizing::Fast {
            cfg.epochs = FAST_EPOCHS;
            cfg.buffer_capacity = (CAPACITY as f64 / 4.0).round() as usize;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV with 51 feature columns and `fault_type`, `zone` labels. Synthetic when absent.
    pub csv: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            csv: None,
            generator: GeneratorConfig::default(),
            train_fraction: TRAIN_FRACTION,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub sizing: Sizing,
    pub dataset: DatasetConfig,
    pub scenarios: Vec<u8>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Partial [`StrategyConfig`]; keys not given keep the scenario defaults.
    pub strategy: toml::Table,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            sizing: Sizing::Full,
            dataset: DatasetConfig::default(),
            scenarios: vec![1, 2, 3, 4],
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            strategy: toml::Table::new(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.scenarios.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            bail!("scenarios, methods and seeds must be non-empty");
        }
        if let Some(s) = self.scenarios.iter().find(|s| !(1..=4).contains(*s)) {
            bail!("unknown scenario {s}; expected 1..=4");
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1)");
        }
        self.dataset.generator.validate()?;
        for &s in &self.scenarios {
            self.strategy_for(s)?;
        }
        Ok(())
    }

    /// Scenario defaults, then the sizing, then the `[strategy]` overrides.
    pub fn strategy_for(&self, scenario: u8) -> anyhow::Result<StrategyConfig> {
        let mut base = StrategyConfig::for_scenario(scenario);
        self.sizing.apply(&mut base);
        let mut table = toml::Table::try_from(&base)?;
        for (k, v) in &self.strategy {
            table.insert(k.clone(), v.clone());
        }
        let cfg: StrategyConfig = table
            .try_into()
            .context("invalid [strategy] block")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator(&self) -> GeneratorConfig {
        let mut g = self.dataset.generator.clone();
        g.rows_per_cell = self.sizing.rows_per_cell(g.rows_per_cell);
        if let Some(counts) = &mut g.counts {
            for c in counts.iter_mut().flatten() {
                *c = self.sizing.rows_per_cell(*c);
            }
        }
        g
    }

    /// Explicit directory, else `$PRODER_OUT`, else `./results`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Parses `"all"` or a comma-separated list of method names.
pub fn parse_methods(s: &str) -> anyhow::Result<Vec<Method>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<Method>().map_err(anyhow::Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_setup() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.strategy_for(1).unwrap(), StrategyConfig::for_scenario(1));
        assert_eq!(c.strategy_for(4).unwrap(), StrategyConfig::for_scenario(4));
        assert_eq!(c.generator(), GeneratorConfig::default());
    }

    #[test]
    fn overrides_sit_on_scenario_defaults() {
        let c = RunConfig::parse("[strategy]\nproder_gamma = 0.25\n").unwrap();
        let s4 = c.strategy_for(4).unwrap();
        assert_eq!((s4.proder_gamma, s4.proder_rho, s4.proder_beta), (0.25, 0.5, 7.2));
    }

    #[test]
    fn fast_sizing() {
        let c = RunConfig::parse("sizing = \"fast\"").unwrap();
        let s = c.strategy_for(2).unwrap();
        assert_eq!((s.epochs, s.buffer_capacity), (15, 91));
        assert_eq!(c.generator().rows_per_cell, 69);
    }

    #[test]
    fn bad_configs_fail() {
        for text in [
            "schema_version = 2",
            "bogus = 1",
            "scenarios = [5]",
            "methods = []",
            "methods = [\"sgd\"]",
            "[strategy]\nnot_a_knob = 1",
            "[strategy]\nreplay_ratio = 2.0",
            "[dataset]\ntrain_fraction = 1.0",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("all").unwrap().len(), 8);
        assert_eq!(parse_methods("er, DER++,proder").unwrap(), vec![Method::Er, Method::Derpp, Method::Proder]);
        assert!(parse_methods("er,xyz").is_err());
    }
}
