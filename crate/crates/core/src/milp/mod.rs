//! Mixed-integer model for tiered embedding placement.
//!
//! Every table is assigned to one GPU (`p_mj`) and picks one inverse-CDF step
//! `i` (`x_ij`): the top `ICDF_j(i)` rows live in HBM and serve at least `i/S`
//! of the table's lookups, the rest live in UVM. A GPU's cost is the
//! coverage-weighted sum of its tables' per-batch lookup times; the objective
//! is the largest GPU cost.

mod lp;
mod plan;
mod solver;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::FeatureStats;
use crate::workload::{validate_table_list, TableSpec};

pub use lp::{
    build_lp_model, export_lp, parse_lp, read_lp, render_lp, LpConstraint, LpFormat, LpModel,
    LpSense,
};
pub use plan::{
    evaluate_placements, read_plan, validate_plan, write_plan, PlanCheck, ShardingPlan,
    TablePlacement,
};
pub use solver::{solve, SolveOptions};

pub const DEFAULT_STEP_COUNT: u32 = 100;

/// Hardware description shared by every GPU of a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub num_gpus: u32,
    pub batch_size: u64,
    /// Fast-tier bytes per GPU.
    pub cap_hbm_bytes: u64,
    /// Slow-tier bytes per GPU.
    pub cap_dram_bytes: u64,
    /// Fast-tier bandwidth in bytes per second.
    pub bw_hbm: f64,
    /// Slow-tier bandwidth in bytes per second.
    pub bw_uvm: f64,
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec {
            num_gpus: 16,
            batch_size: 16384,
            cap_hbm_bytes: 24 << 30,
            cap_dram_bytes: 128 << 30,
            bw_hbm: 1.555e12,
            bw_uvm: 1.6e10,
        }
    }
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 || self.batch_size == 0 {
            return Err(Error::validation(
                "num_gpus and batch_size must be positive",
            ));
        }
        if self.cap_hbm_bytes == 0 || self.cap_dram_bytes == 0 {
            return Err(Error::validation(
                "cap_hbm_bytes and cap_dram_bytes must be positive",
            ));
        }
        if !(self.bw_hbm.is_finite() && self.bw_uvm.is_finite() && self.bw_uvm > 0.0) {
            return Err(Error::validation("bandwidths must be finite and positive"));
        }
        if self.bw_hbm <= self.bw_uvm {
            return Err(Error::validation("bw_hbm must exceed bw_uvm"));
        }
        Ok(())
    }
}

/// Which profiled statistics enter the cost model; a disabled one is replaced by 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_pooling: bool,
    pub use_coverage: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_pooling: true,
        use_coverage: true,
    };
    pub const CDF_ONLY: Ablation = Ablation {
        use_pooling: false,
        use_coverage: false,
    };
    pub const CDF_POOLING: Ablation = Ablation {
        use_pooling: true,
        use_coverage: false,
    };
    pub const CDF_COVERAGE: Ablation = Ablation {
        use_pooling: false,
        use_coverage: true,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// How the HBM and UVM parts of a lookup combine into a table cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Reads from the two tiers are serialized.
    #[default]
    Sum,
    /// Reads from the two tiers overlap completely.
    Max,
}

/// One memory tier as seen by a single GPU.
#[derive(Debug, Clone, PartialEq)]
pub struct TierSpec {
    pub name: &'static str,
    pub capacity_bytes: u64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone)]
pub struct MilpInstance {
    tables: Vec<(TableSpec, FeatureStats)>,
    system: SystemSpec,
    ablation: Ablation,
    step_count: u32,
    aggregation: Aggregation,
    /// Fast tier first. The solver handles exactly two.
    tiers: Vec<TierSpec>,
    /// `icdf[j][i]` is the number of rows needed to serve `i/S` of table `j`'s lookups.
    icdf: Vec<Vec<u64>>,
}

/// Assembles a model instance from aligned statistics and table specs.
pub fn build_instance(
    stats: &[FeatureStats],
    specs: &[TableSpec],
    system: SystemSpec,
    ablation: Ablation,
    step_count: u32,
) -> Result<MilpInstance> {
    if specs.is_empty() {
        return Err(Error::invalid("an instance needs at least one table"));
    }
    if stats.len() != specs.len() {
        return Err(Error::invalid(format!(
            "{} stats entries for {} tables",
            stats.len(),
            specs.len()
        )));
    }
    if step_count == 0 {
        return Err(Error::invalid("step_count must be at least 1"));
    }
    validate_table_list(specs).map_err(|e| Error::invalid(e.to_string()))?;
    system
        .validate()
        .map_err(|e| Error::invalid(e.to_string()))?;
    for (st, sp) in stats.iter().zip(specs) {
        if st.table_id != sp.table_id {
            return Err(Error::invalid(format!(
                "stats for table {} paired with spec of table {}",
                st.table_id, sp.table_id
            )));
        }
        if st.distinct_rows_accessed > sp.hash_size {
            return Err(Error::invalid(format!(
                "table {}: {} accessed rows exceed hash size {}",
                sp.table_id, st.distinct_rows_accessed, sp.hash_size
            )));
        }
    }
    let icdf = stats
        .iter()
        .map(|s| s.icdf_at(step_count as usize))
        .collect();
    let tiers = vec![
        TierSpec {
            name: "hbm",
            capacity_bytes: system.cap_hbm_bytes,
            bandwidth: system.bw_hbm,
        },
        TierSpec {
            name: "uvm",
            capacity_bytes: system.cap_dram_bytes,
            bandwidth: system.bw_uvm,
        },
    ];
    Ok(MilpInstance {
        tables: specs.iter().copied().zip(stats.iter().cloned()).collect(),
        system,
        ablation,
        step_count,
        aggregation: Aggregation::Sum,
        tiers,
        icdf,
    })
}

impl MilpInstance {
    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn num_gpus(&self) -> usize {
        self.system.num_gpus as usize
    }

    pub fn tables(&self) -> &[(TableSpec, FeatureStats)] {
        &self.tables
    }

    pub fn spec(&self, j: usize) -> &TableSpec {
        &self.tables[j].0
    }

    pub fn stats(&self, j: usize) -> &FeatureStats {
        &self.tables[j].1
    }

    pub fn system(&self) -> &SystemSpec {
        &self.system
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn tiers(&self) -> &[TierSpec] {
        &self.tiers
    }

    /// Rows held in HBM when table `j` takes step `i`.
    pub fn icdf(&self, j: usize, i: u32) -> u64 {
        self.icdf[j][i as usize]
    }

    /// HBM bytes of table `j` at step `i`.
    pub fn mem_bytes(&self, j: usize, i: u32) -> u64 {
        self.icdf(j, i) * self.spec(j).row_bytes()
    }

    pub fn emb_bytes(&self, j: usize) -> u64 {
        self.spec(j).table_bytes()
    }

    pub fn pct(&self, i: u32) -> f64 {
        i as f64 / self.step_count as f64
    }

    /// Pooling factor used by the cost model after ablation.
    pub fn pooling(&self, j: usize) -> f64 {
        if self.ablation.use_pooling {
            self.stats(j).avg_pooling
        } else {
            1.0
        }
    }

    /// Coverage used by the cost model after ablation.
    pub fn coverage(&self, j: usize) -> f64 {
        if self.ablation.use_coverage {
            self.stats(j).coverage
        } else {
            1.0
        }
    }

    /// Bytes read by one batch of table `j` lookups when the feature is present.
    pub fn batch_bytes(&self, j: usize) -> f64 {
        let spec = self.spec(j);
        self.pooling(j) * spec.dim as f64 * spec.elem_bytes as f64 * self.system.batch_size as f64
    }

    /// Per-batch lookup time of table `j` when `pct` of its lookups hit HBM.
    pub fn table_cost(&self, j: usize, pct: f64) -> f64 {
        table_cost(self.batch_bytes(j), pct, &self.system, self.aggregation)
    }

    /// Coverage-weighted cost of table `j` at step `i`; a term of `c_m`.
    pub fn weighted_cost(&self, j: usize, i: u32) -> f64 {
        self.coverage(j) * self.table_cost(j, self.pct(i))
    }

    /// Number of binary variables: `M*J` assignments plus `(S+1)*J` steps.
    pub fn binary_variable_count(&self) -> usize {
        let (m, j) = (self.num_gpus(), self.num_tables());
        m * j + (self.step_count as usize + 1) * j
    }

    /// Binary variables plus the continuous `mem_j`, `pct_j`, `c_m` and `C`
    /// (and `c_j` under [`Aggregation::Max`]).
    pub fn variable_count(&self) -> usize {
        let (m, j) = (self.num_gpus(), self.num_tables());
        let per_table = match self.aggregation {
            Aggregation::Sum => 2,
            Aggregation::Max => 3,
        };
        self.binary_variable_count() + per_table * j + m + 1
    }

    /// Capacity pre-checks that do not need a search.
    pub fn check_feasibility(&self) -> Result<()> {
        let sys = &self.system;
        let total: u128 = (0..self.num_tables())
            .map(|j| self.emb_bytes(j) as u128)
            .sum();
        let cap = sys.num_gpus as u128 * (sys.cap_hbm_bytes as u128 + sys.cap_dram_bytes as u128);
        if total > cap {
            return Err(Error::Infeasible(format!(
                "aggregate capacity: tables need {total} bytes but {} GPUs hold {cap} bytes of HBM+UVM",
                sys.num_gpus
            )));
        }
        for j in 0..self.num_tables() {
            let ok = (0..=self.step_count).any(|i| {
                let h = self.mem_bytes(j, i);
                h <= sys.cap_hbm_bytes && self.emb_bytes(j) - h <= sys.cap_dram_bytes
            });
            if !ok {
                return Err(Error::Infeasible(format!(
                    "table {j} ({} bytes) fits no single GPU's HBM+UVM split",
                    self.emb_bytes(j)
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch lookup time for `batch_bytes` of reads with `pct` served by HBM.
pub fn table_cost(
    batch_bytes: f64,
    pct: f64,
    system: &SystemSpec,
    aggregation: Aggregation,
) -> f64 {
    let fast = pct / system.bw_hbm;
    let slow = (1.0 - pct) / system.bw_uvm;
    match aggregation {
        Aggregation::Sum => batch_bytes * (fast + slow),
        Aggregation::Max => batch_bytes * fast.max(slow),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn uniform_stats(
        table_id: u32,
        rows: usize,
        pooling: f64,
        coverage: f64,
    ) -> FeatureStats {
        FeatureStats::from_counts(table_id, &vec![1; rows], coverage, pooling).unwrap()
    }

    #[test]
    fn table_cost_full_hbm() {
        let sys = SystemSpec::default();
        let c = table_cost(10.0 * 64.0 * 4.0 * 16384.0, 1.0, &sys, Aggregation::Sum);
        assert!((c - 2.698e-5).abs() < 5e-4 * 2.698e-5, "{c}");
        assert!((c - 41_943_040.0 / 1.555e12).abs() < 1e-20);
    }

    #[test]
    fn table_cost_equal_bandwidths_is_flat() {
        let sys = SystemSpec {
            bw_uvm: 1.555e12,
            ..SystemSpec::default()
        };
        let a = table_cost(1e6, 0.0, &sys, Aggregation::Sum);
        let b = table_cost(1e6, 1.0, &sys, Aggregation::Sum);
        assert!((a - b).abs() <= 1e-15 * a);
    }

    #[test]
    fn table_cost_decreases_in_pct() {
        let sys = SystemSpec::default();
        let cs: Vec<f64> = (0..=10)
            .map(|k| table_cost(1e6, k as f64 / 10.0, &sys, Aggregation::Sum))
            .collect();
        assert!(cs.windows(2).all(|w| w[1] < w[0]));
        let d1 = cs[0] - cs[1];
        assert!(cs
            .windows(2)
            .all(|w| ((w[0] - w[1]) - d1).abs() < 1e-9 * d1));
    }

    #[test]
    fn single_table_single_gpu_counts() {
        let specs = [TableSpec::new(0, 10, 10, 4, 4).unwrap()];
        let stats = [uniform_stats(0, 10, 1.0, 1.0)];
        let sys = SystemSpec {
            num_gpus: 1,
            ..SystemSpec::default()
        };
        let inst = build_instance(&stats, &specs, sys, Ablation::FULL, 100).unwrap();
        assert_eq!(inst.binary_variable_count(), 1 + 101);
    }

    #[test]
    fn rm_scale_variable_count() {
        let specs: Vec<TableSpec> = (0..397)
            .map(|j| TableSpec::new(j, 10, 10, 4, 4).unwrap())
            .collect();
        let stats: Vec<FeatureStats> = (0..397).map(|j| uniform_stats(j, 10, 1.0, 1.0)).collect();
        let sys = SystemSpec::default();
        let inst = build_instance(&stats, &specs, sys, Ablation::FULL, 100).unwrap();
        let n = inst.variable_count();
        assert_eq!(n, 16 * 397 + 101 * 397 + 2 * 397 + 16 + 1);
        assert!((45_000..50_000).contains(&n));
    }

    #[test]
    fn ablation_replaces_pooling() {
        let specs = [TableSpec::new(0, 10, 10, 4, 4).unwrap()];
        let stats = [uniform_stats(0, 10, 7.0, 0.5)];
        let sys = SystemSpec::default();
        let no_pool = build_instance(&stats, &specs, sys, Ablation::CDF_COVERAGE, 10).unwrap();
        assert_eq!(no_pool.pooling(0), 1.0);
        assert_eq!(no_pool.coverage(0), 0.5);
        let full = build_instance(&stats, &specs, sys, Ablation::FULL, 10).unwrap();
        assert!((full.weighted_cost(0, 3) / no_pool.weighted_cost(0, 3) - 7.0).abs() < 1e-12);
        let none = build_instance(&stats, &specs, sys, Ablation::CDF_ONLY, 10).unwrap();
        assert_eq!((none.pooling(0), none.coverage(0)), (1.0, 1.0));
    }

    #[test]
    fn mismatched_tables_rejected() {
        let specs = [TableSpec::new(0, 10, 10, 4, 4).unwrap()];
        let stats = [uniform_stats(1, 10, 1.0, 1.0)];
        let r = build_instance(&stats, &specs, SystemSpec::default(), Ablation::FULL, 10);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        let r = build_instance(&[], &specs, SystemSpec::default(), Ablation::FULL, 10);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn aggregate_infeasibility_is_named() {
        let specs = [TableSpec::new(0, 10, 1000, 4, 4).unwrap()];
        let stats = [uniform_stats(0, 1000, 1.0, 1.0)];
        let sys = SystemSpec {
            num_gpus: 1,
            cap_hbm_bytes: 1000,
            cap_dram_bytes: 1000,
            ..SystemSpec::default()
        };
        let inst = build_instance(&stats, &specs, sys, Ablation::FULL, 10).unwrap();
        match inst.check_feasibility() {
            Err(Error::Infeasible(m)) => assert!(m.contains("aggregate"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
