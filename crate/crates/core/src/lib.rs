//! Embedding-table sharding across a fast and a slow memory tier.
//!
//! The pipeline runs trace generation ([`workload`]), access profiling
//! ([`profiler`]), placement planning ([`milp`] for the exact model and
//! [`baselines`] for heuristics), per-row remapping ([`remap`]) and trace
//! replay ([`sim`]).

pub mod baselines;
pub mod error;
pub mod milp;
pub mod profiler;
pub mod remap;
pub mod sim;
pub mod workload;

pub use baselines::{baseline_plan, CostFunction, Heuristic};
pub use error::{Error, Result};
pub use milp::{
    build_instance, solve, Ablation, MilpInstance, ShardingPlan, SolveOptions, SystemSpec,
};
pub use profiler::{build_icdf, profile, FeatureStats};
pub use remap::{build_remap, build_remaps, RemapTable, Tier};
pub use sim::{amdahl_speedup, compare_plans, simulate, SimReport};
pub use workload::{generate_trace, FeatureGenSpec, PoolingLaw, TableSpec, Trace};
