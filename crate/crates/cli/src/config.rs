//! Experiment configs: one JSON document per subcommand.
//!
//! Every config owns a single `seed` that drives all of its randomness (the
//! toy network's weights are fixed separately by `network.seed`). A config
//! file may also be a `run.json` emitted by an earlier run, in which case
//! its embedded config is used.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use relsa::abft::{CalibrationGrid, ChecksumPlan, Dataflow, Fault, ProtectOptions, SoupSpec};
use relsa::dta::TimingEnv;
use relsa::inject::{
    geometric_rates, Component, InjectionSpec, Selection, Site, Stage, ToyConfig, ToyNetwork, WIDE_BITS,
};
use relsa::{Error, Result};

/// Timing environment for reordering runs: the clock sits just above the
/// longest non-flip aged path, so only sign flips fail.
pub fn read_env() -> TimingEnv {
    TimingEnv {
        clock_period: 1.43,
        ..TimingEnv::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtaConfig {
    pub seed: u64,
    pub env: TimingEnv,
    /// Workload suite manifest; the seeded synthetic suite when absent.
    pub suite: Option<PathBuf>,
}

impl Default for DtaConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            env: TimingEnv::default(),
            suite: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadConfig {
    pub seed: u64,
    pub env: TimingEnv,
    /// Layer suite manifest; the seeded synthetic layer suite when absent.
    pub suite: Option<PathBuf>,
    /// Cluster counts tried by cluster-then-reorder; the best one is reported.
    pub ks: Vec<usize>,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            env: read_env(),
            suite: None,
            ks: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub grid: CalibrationGrid,
    pub threshold: f64,
    pub trials: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            grid: CalibrationGrid {
                freqs: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0],
                mags: (0..8).map(|i| (1u32 << i) as f64).collect(),
            },
            threshold: 0.05,
            trials: 2,
        }
    }
}

/// Faults applied to the protected site's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum FaultSource {
    None,
    /// Mixed small and large tile faults sized against the region.
    Soup {
        small_fraction: f64,
        small_freq: f64,
        small_scale: f64,
        large_scale: f64,
    },
    /// Random faults from an injection spec (its seed is replaced by the
    /// config seed).
    Injection {
        spec: InjectionSpec,
    },
    Explicit {
        faults: Vec<Fault>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbftConfig {
    pub seed: u64,
    pub network: ToyConfig,
    pub site: Site,
    pub stage: Stage,
    pub plan: ChecksumPlan,
    /// Critical-region file; calibrated from `calibration` when absent.
    pub region: Option<PathBuf>,
    pub calibration: CalibrationConfig,
    pub faults: FaultSource,
    pub protect: ProtectOptions,
}

impl Default for AbftConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            network: ToyConfig::default(),
            site: Site {
                layer: 0,
                component: Component::OProj,
            },
            stage: Stage::Prefill,
            plan: ChecksumPlan::new(Dataflow::WeightStationary, 8, 16, 32),
            region: None,
            calibration: CalibrationConfig::default(),
            faults: FaultSource::Soup {
                small_fraction: 0.9,
                small_freq: 0.125,
                small_scale: 0.5,
                large_scale: 4.0,
            },
            protect: ProtectOptions::default(),
        }
    }
}

impl AbftConfig {
    pub fn soup(&self) -> Option<SoupSpec> {
        match self.faults {
            FaultSource::Soup {
                small_fraction,
                small_freq,
                small_scale,
                large_scale,
            } => Some(SoupSpec {
                small_fraction,
                small_freq,
                small_scale,
                large_scale,
                seed: self.seed,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectConfig {
    /// Added to every spec's own seed.
    pub seed: u64,
    pub network: ToyConfig,
    /// Seeds averaged per spec.
    pub trials: usize,
    pub sweep: Vec<InjectionSpec>,
}

impl Default for InjectConfig {
    fn default() -> Self {
        let network = ToyConfig::default();
        let sweep = default_sweep(&network);
        Self {
            seed: 0,
            network,
            trials: 4,
            sweep,
        }
    }
}

/// Layer-wise, bit-wise, component-by-stage and constant-total slices.
pub fn default_sweep(network: &ToyConfig) -> Vec<InjectionSpec> {
    let mut sweep = Vec::new();
    let stages = [Stage::Prefill, Stage::Decode];
    for stage in stages {
        for layer in 0..network.n_layers {
            for c in Component::BLOCK {
                sweep.push(InjectionSpec::bit(c, layer, 24, 0.01, stage, 100));
            }
        }
    }
    for stage in stages {
        for bit in 0..WIDE_BITS {
            sweep.push(InjectionSpec::bit(Component::Qkv, 0, bit, 0.01, stage, 100));
        }
    }
    // Constant total magnitude of 128 quanta spread over 1..64 elements.
    if let Ok(net) = ToyNetwork::build(network.clone()) {
        for stage in stages {
            for c in Component::BLOCK {
                let site = Site { layer: 0, component: c };
                let Ok(n) = net.site_elements(site, stage) else {
                    continue;
                };
                for rate in geometric_rates(n, 64, 5) {
                    let count = (rate * n as f64).round().max(1.0);
                    sweep.push(
                        InjectionSpec::value(c, 0, 128.0 / count, rate, stage, 100)
                            .with_selection(Selection::ExactCount),
                    );
                }
            }
        }
    }
    sweep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Dta,
    Read,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub kind: SuiteKind,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            kind: SuiteKind::Dta,
        }
    }
}

pub trait ExperimentConfig {
    fn set_seed(&mut self, seed: u64);
    /// Make file references absolute, relative ones against `base`.
    fn resolve_paths(&mut self, _base: &Path) {}
    fn validate(&self) -> Result<()>;
}

/// Absolute paths keep an emitted `run.json` valid wherever it is read from.
fn resolve(path: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = path {
        let joined = base.join(&*p);
        *p = std::path::absolute(&joined).unwrap_or(joined);
    }
}

impl ExperimentConfig for DtaConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn resolve_paths(&mut self, base: &Path) {
        resolve(&mut self.suite, base);
    }
    fn validate(&self) -> Result<()> {
        self.env.validate()
    }
}

impl ExperimentConfig for ReadConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn resolve_paths(&mut self, base: &Path) {
        resolve(&mut self.suite, base);
    }
    fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::invalid("ks must list positive cluster counts"));
        }
        Ok(())
    }
}

impl ExperimentConfig for AbftConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn resolve_paths(&mut self, base: &Path) {
        resolve(&mut self.region, base);
    }
    fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.site.component == Component::Other {
            return Err(Error::invalid("site.component must be a block component"));
        }
        if self.site.layer >= self.network.n_layers {
            return Err(Error::invalid(format!(
                "site.layer {} out of range for {} layers",
                self.site.layer, self.network.n_layers
            )));
        }
        self.plan.validate()?;
        if self.region.is_none() {
            self.calibration.grid.validate()?;
            if self.calibration.trials == 0 {
                return Err(Error::invalid("calibration.trials must be positive"));
            }
            if self.calibration.threshold.is_nan() || self.calibration.threshold < 0.0 {
                return Err(Error::invalid("calibration.threshold must be non-negative"));
            }
        }
        if let Some(soup) = self.soup() {
            soup.validate()?;
        }
        if let FaultSource::Injection { spec } = &self.faults {
            spec.validate()?;
            if spec.target != self.site.component || spec.layer_index != self.site.layer {
                return Err(Error::invalid("faults.spec must target the protected site"));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig for InjectConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials must be positive"));
        }
        for (i, spec) in self.sweep.iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::invalid(format!("sweep[{i}]: {e}")))?;
        }
        Ok(())
    }
}

impl ExperimentConfig for GenConfig {
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Metadata written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    pub outputs: Vec<String>,
}

/// Load, override, resolve and validate a config. Without a path the
/// defaults are used.
pub fn load<C>(command: &str, path: Option<&Path>, seed: Option<u64>) -> Result<C>
where
    C: DeserializeOwned + Default + ExperimentConfig,
{
    let mut cfg = match path {
        None => C::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
            let is_metadata = value.get("command").is_some() && value.get("config").is_some();
            let mut cfg: C = if is_metadata {
                let recorded = value["command"].as_str().unwrap_or_default();
                if recorded != command {
                    return Err(Error::invalid(format!(
                        "{}: run metadata is for `{recorded}`, not `{command}`",
                        path.display()
                    )));
                }
                let meta: RunMetadata<C> = serde_json::from_value(value).map_err(|source| Error::Json {
                    path: path.to_path_buf(),
                    source,
                })?;
                meta.config
            } else {
                serde_json::from_value(value).map_err(|source| Error::Json {
                    path: path.to_path_buf(),
                    source,
                })?
            };
            let base = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            cfg.resolve_paths(base);
            cfg
        }
    };
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}
