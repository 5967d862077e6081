//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! output_dir = "out/desk_2x"
//!
//! [workload]
//! num_samples = 65536
//! hash_scale = 2
//! tables = [
//!   { cardinality = 200000, hash_size = 40000, dim = 64, zipf_exponent = 1.05, mean_pooling = 8.0, coverage = 0.9 },
//! ]
//!
//! [system]
//! num_gpus = 4
//! batch_size = 2048
//!
//! [planner]
//! strategy = "milp"
//! ablation = "full"
//!
//! [profiling]
//! sample_rate = 1.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shardplan_core::milp::{Ablation, Aggregation, SystemSpec, DEFAULT_STEP_COUNT};
use shardplan_core::workload::derive_seed;
use shardplan_core::{CostFunction, FeatureGenSpec, PoolingLaw, TableSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub profiling: ProfilingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Existing trace file; when set, `tables` is ignored and nothing is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub num_samples: u64,
    /// Multiplier applied to every `hash_size`.
    #[serde(default = "one")]
    pub hash_scale: u64,
    #[serde(default)]
    pub tables: Vec<TableConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    pub cardinality: u64,
    pub hash_size: u64,
    pub dim: u32,
    #[serde(default = "four")]
    pub elem_bytes: u32,
    pub zipf_exponent: f64,
    pub mean_pooling: f64,
    pub coverage: f64,
    #[serde(default = "poisson")]
    pub pooling_law: PoolingLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub num_gpus: u32,
    pub batch_size: u64,
    pub hbm_bytes: u64,
    pub dram_bytes: u64,
    pub bw_hbm: f64,
    pub bw_uvm: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let s = SystemSpec::default();
        SystemConfig {
            num_gpus: s.num_gpus,
            batch_size: s.batch_size,
            hbm_bytes: s.cap_hbm_bytes,
            dram_bytes: s.cap_dram_bytes,
            bw_hbm: s.bw_hbm,
            bw_uvm: s.bw_uvm,
        }
    }
}

impl SystemConfig {
    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            num_gpus: self.num_gpus,
            batch_size: self.batch_size,
            cap_hbm_bytes: self.hbm_bytes,
            cap_dram_bytes: self.dram_bytes,
            bw_hbm: self.bw_hbm,
            bw_uvm: self.bw_uvm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Milp,
    Greedy,
    Ldm,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Milp => "milp",
            StrategyKind::Greedy => "greedy",
            StrategyKind::Ldm => "ldm",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "milp" => Ok(StrategyKind::Milp),
            "greedy" => Ok(StrategyKind::Greedy),
            "ldm" => Ok(StrategyKind::Ldm),
            _ => Err(format!(
                "unknown strategy {s:?} (expected milp, greedy or ldm)"
            )),
        }
    }
}

/// Named cost-model ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AblationName {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "cdf")]
    Cdf,
    #[serde(rename = "cdf+coverage")]
    CdfCoverage,
    #[serde(rename = "cdf+pooling")]
    CdfPooling,
}

impl AblationName {
    pub const ALL: [AblationName; 4] = [
        AblationName::Full,
        AblationName::CdfPooling,
        AblationName::CdfCoverage,
        AblationName::Cdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationName::Full => "full",
            AblationName::Cdf => "cdf",
            AblationName::CdfCoverage => "cdf+coverage",
            AblationName::CdfPooling => "cdf+pooling",
        }
    }

    pub fn ablation(self) -> Ablation {
        match self {
            AblationName::Full => Ablation::FULL,
            AblationName::Cdf => Ablation::CDF_ONLY,
            AblationName::CdfCoverage => Ablation::CDF_COVERAGE,
            AblationName::CdfPooling => Ablation::CDF_POOLING,
        }
    }
}

impl FromStr for AblationName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AblationName::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                format!("unknown ablation {s:?} (expected full, cdf, cdf+coverage or cdf+pooling)")
            })
    }
}

impl fmt::Display for AblationName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn parse_cost(s: &str) -> Result<CostFunction, String> {
    CostFunction::ALL
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown cost {s:?} (expected size, lookup or size-lookup)"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub strategy: StrategyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostFunction>,
    pub ablation: AblationName,
    pub aggregation: Aggregation,
    pub step_count: u32,
    /// Seconds; a time limit makes the MILP result depend on machine speed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<f64>,
    /// Branch-and-bound node budget; deterministic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_limit: Option<u64>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            strategy: StrategyKind::Milp,
            cost: None,
            ablation: AblationName::Full,
            aggregation: Aggregation::Sum,
            step_count: DEFAULT_STEP_COUNT,
            time_limit: None,
            node_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfilingConfig {
    pub sample_rate: f64,
    /// Defaults to a seed derived from the master seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ProfilingConfig {
    fn default() -> Self {
        ProfilingConfig {
            sample_rate: 1.0,
            seed: None,
        }
    }
}

fn one() -> u64 {
    1
}

fn four() -> u32 {
    4
}

fn poisson() -> PoolingLaw {
    PoolingLaw::Poisson
}

const TRACE_SEED_KEY: u64 = 1;
const PROFILE_SEED_KEY: u64 = 2;

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok(cfg)
    }

    /// Checks cross-field rules; the message names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        let w = &self.workload;
        if w.trace.is_none() {
            if w.tables.is_empty() {
                return Err(
                    "workload.tables must not be empty when workload.trace is unset".into(),
                );
            }
            if w.num_samples == 0 {
                return Err("workload.num_samples must be positive".into());
            }
        }
        if w.hash_scale == 0 {
            return Err("workload.hash_scale must be positive".into());
        }
        for (j, t) in w.tables.iter().enumerate() {
            t.hash_size.checked_mul(w.hash_scale).ok_or_else(|| {
                format!("workload.tables[{j}].hash_size overflows after hash_scale")
            })?;
        }
        self.system
            .spec()
            .validate()
            .map_err(|e| format!("system: {e}"))?;
        let p = &self.planner;
        if p.strategy != StrategyKind::Milp && p.cost.is_none() {
            return Err(format!(
                "planner.cost is required when planner.strategy is {}",
                p.strategy.name()
            ));
        }
        if p.step_count == 0 {
            return Err("planner.step_count must be positive".into());
        }
        if let Some(t) = p.time_limit {
            if !(t > 0.0 && t.is_finite()) {
                return Err("planner.time_limit must be a positive number of seconds".into());
            }
        }
        let r = self.profiling.sample_rate;
        if !(r > 0.0 && r <= 1.0) {
            return Err(format!("profiling.sample_rate must lie in (0, 1], got {r}"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn trace_seed(&self) -> u64 {
        derive_seed(self.seed, TRACE_SEED_KEY)
    }

    pub fn profile_seed(&self) -> u64 {
        self.profiling
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, PROFILE_SEED_KEY))
    }

    /// Table and generator specs after `hash_scale`.
    pub fn table_specs(&self) -> Result<Vec<(TableSpec, FeatureGenSpec)>, CliError> {
        let w = &self.workload;
        w.tables
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let spec = TableSpec::new(
                    j as u32,
                    t.cardinality,
                    t.hash_size * w.hash_scale,
                    t.dim,
                    t.elem_bytes,
                )?;
                let gen = FeatureGenSpec {
                    zipf_exponent: t.zipf_exponent,
                    mean_pooling: t.mean_pooling,
                    coverage: t.coverage,
                    pooling_law: t.pooling_law,
                };
                gen.validate()?;
                Ok((spec, gen))
            })
            .collect()
    }
}
