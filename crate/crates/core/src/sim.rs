//! Trace replay against a sharding plan.
//!
//! Every looked-up row is routed through its table's remap to the fast or the
//! slow tier of the GPU holding the table. Counts are averaged over full
//! batches (a trailing partial batch is dropped) and turned into a modeled
//! iteration time with the same bandwidth-linear model the planner uses.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::milp::{ShardingPlan, SystemSpec};
use crate::remap::{RemapTable, Tier};
use crate::workload::{TableSpec, Trace};

/// Per-GPU averages over one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuReport {
    pub gpu: u32,
    pub hbm_accesses: f64,
    pub uvm_accesses: f64,
    /// Seconds.
    pub est_iter_cost: f64,
}

/// Whole-trace access totals of one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TableCounts {
    pub hbm: u64,
    pub uvm: u64,
}

impl TableCounts {
    pub fn total(&self) -> u64 {
        self.hbm + self.uvm
    }

    /// Fraction of this table's accesses served by HBM (0 for an unused table).
    pub fn hit_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.hbm as f64 / self.total() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub strategy: String,
    pub batch_size: u64,
    pub iterations: u64,
    pub dropped_samples: u64,
    pub gpus: Vec<GpuReport>,
    pub tables: Vec<TableCounts>,
    pub min_cost: f64,
    pub max_cost: f64,
    pub mean_cost: f64,
    /// Population standard deviation of per-GPU cost.
    pub stddev_cost: f64,
    pub uvm_access_fraction: f64,
}

impl SimReport {
    pub fn total_hbm(&self) -> u64 {
        self.tables.iter().map(|t| t.hbm).sum()
    }

    pub fn total_uvm(&self) -> u64 {
        self.tables.iter().map(|t| t.uvm).sum()
    }

    /// Aligned plain-text table.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "strategy {}  batch {}  iterations {}  dropped samples {}",
            self.strategy, self.batch_size, self.iterations, self.dropped_samples
        );
        let _ = writeln!(
            s,
            "{:>4} {:>16} {:>16} {:>16}",
            "gpu", "hbm_acc/iter", "uvm_acc/iter", "est_cost_s"
        );
        for g in &self.gpus {
            let _ = writeln!(
                s,
                "{:>4} {:>16.1} {:>16.1} {:>16.6e}",
                g.gpu, g.hbm_accesses, g.uvm_accesses, g.est_iter_cost
            );
        }
        let _ = writeln!(
            s,
            "cost min {:.6e}  max {:.6e}  mean {:.6e}  stddev {:.6e}",
            self.min_cost, self.max_cost, self.mean_cost, self.stddev_cost
        );
        let _ = writeln!(s, "uvm access fraction {:.6}", self.uvm_access_fraction);
        s
    }

    /// CSV with columns `gpu,hbm_accesses,uvm_accesses,est_iter_cost_s`.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("gpu,hbm_accesses,uvm_accesses,est_iter_cost_s\n");
        for g in &self.gpus {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                g.gpu, g.hbm_accesses, g.uvm_accesses, g.est_iter_cost
            );
        }
        s
    }
}

/// Replays `trace` in batches of `batch_size` consecutive samples.
pub fn simulate(
    trace: &Trace,
    plan: &ShardingPlan,
    remaps: &[RemapTable],
    system: &SystemSpec,
    batch_size: u64,
) -> Result<SimReport> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let tables = trace.tables();
    let m = plan.num_gpus();
    let mut gpu_of = Vec::with_capacity(tables.len());
    for spec in tables {
        let p = plan.placement(spec.table_id).ok_or_else(|| {
            Error::validation(format!("table {} is missing from the plan", spec.table_id))
        })?;
        if p.gpu as usize >= m {
            return Err(Error::validation(format!(
                "table {} placed on missing GPU {}",
                spec.table_id, p.gpu
            )));
        }
        let r = remaps
            .get(spec.table_id as usize)
            .filter(|r| r.table_id() == spec.table_id)
            .ok_or_else(|| Error::validation(format!("no remap for table {}", spec.table_id)))?;
        if r.hash_size() != spec.hash_size || r.hbm_rows() != p.hbm_rows {
            return Err(Error::validation(format!(
                "remap of table {} disagrees with the plan or table spec",
                spec.table_id
            )));
        }
        gpu_of.push(p.gpu as usize);
    }

    let iterations = trace.num_samples() / batch_size;
    if iterations == 0 {
        return Err(Error::invalid(format!(
            "trace has {} samples, fewer than one batch of {batch_size}",
            trace.num_samples()
        )));
    }
    let limit = iterations * batch_size;
    let n_records = trace.records_before(limit);

    const CHUNK: usize = 1 << 14;
    let counts = (0..n_records.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut local = vec![TableCounts::default(); tables.len()];
            for k in c * CHUNK..((c + 1) * CHUNK).min(n_records) {
                let rec = trace.record(k);
                let t = rec.table_id as usize;
                let remap = &remaps[t];
                let slot = &mut local[t];
                for &id in rec.ids {
                    match remap.tier(id) {
                        Tier::Fast => slot.hbm += 1,
                        Tier::Slow | Tier::Unallocated => slot.uvm += 1,
                    }
                }
            }
            local
        })
        .reduce(
            || vec![TableCounts::default(); tables.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.hbm += y.hbm;
                    x.uvm += y.uvm;
                }
                a
            },
        );

    let it = iterations as f64;
    let mut gpus: Vec<GpuReport> = (0..m)
        .map(|g| GpuReport {
            gpu: g as u32,
            hbm_accesses: 0.0,
            uvm_accesses: 0.0,
            est_iter_cost: 0.0,
        })
        .collect();
    for (t, c) in counts.iter().enumerate() {
        let row = tables[t].row_bytes() as f64;
        let g = &mut gpus[gpu_of[t]];
        g.hbm_accesses += c.hbm as f64 / it;
        g.uvm_accesses += c.uvm as f64 / it;
        g.est_iter_cost +=
            (c.hbm as f64 * row / system.bw_hbm + c.uvm as f64 * row / system.bw_uvm) / it;
    }
    let costs: Vec<f64> = gpus.iter().map(|g| g.est_iter_cost).collect();
    let mean = costs.iter().sum::<f64>() / m as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / m as f64;
    let hbm: u64 = counts.iter().map(|c| c.hbm).sum();
    let uvm: u64 = counts.iter().map(|c| c.uvm).sum();
    Ok(SimReport {
        strategy: plan.strategy.clone(),
        batch_size,
        iterations,
        dropped_samples: trace.num_samples() - limit,
        gpus,
        tables: counts,
        min_cost: costs.iter().copied().fold(f64::INFINITY, f64::min),
        max_cost: costs.iter().copied().fold(0.0, f64::max),
        mean_cost: mean,
        stddev_cost: var.sqrt(),
        uvm_access_fraction: if hbm + uvm == 0 {
            0.0
        } else {
            uvm as f64 / (hbm + uvm) as f64
        },
    })
}

/// Row-level disagreement between two plans over the same tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOverlap {
    /// Share of the rows `b` keeps in UVM that `a` keeps in HBM.
    pub uvm_to_hbm: f64,
    /// Share of the rows `b` keeps in HBM that `a` keeps in UVM.
    pub hbm_to_uvm: f64,
}

/// Compares the HBM row sets of two plans.
///
/// Both plans fill HBM from the same per-table row order (the profiler's
/// ranking, as in the remap), so each HBM set is a prefix of that order and
/// the overlap follows from the two prefix lengths.
pub fn compare_plans(
    a: &ShardingPlan,
    b: &ShardingPlan,
    specs: &[TableSpec],
) -> Result<PlanOverlap> {
    if a.placements.len() != specs.len() || b.placements.len() != specs.len() {
        return Err(Error::validation("plans cover different table sets"));
    }
    let (mut uvm_b, mut uvm_b_hbm_a, mut hbm_b, mut hbm_b_uvm_a) = (0u128, 0u128, 0u128, 0u128);
    for spec in specs {
        let id = spec.table_id;
        let (pa, pb) = match (a.placement(id), b.placement(id)) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(Error::validation(format!(
                    "table {id} missing from one plan"
                )))
            }
        };
        let (ka, kb, h) = (
            pa.hbm_rows as u128,
            pb.hbm_rows as u128,
            spec.hash_size as u128,
        );
        if ka > h || kb > h {
            return Err(Error::validation(format!(
                "table {id}: hbm_rows exceed hash size"
            )));
        }
        uvm_b += h - kb;
        uvm_b_hbm_a += ka.saturating_sub(kb);
        hbm_b += kb;
        hbm_b_uvm_a += kb.saturating_sub(ka);
    }
    let ratio = |n: u128, d: u128| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(PlanOverlap {
        uvm_to_hbm: ratio(uvm_b_hbm_a, uvm_b),
        hbm_to_uvm: ratio(hbm_b_uvm_a, hbm_b),
    })
}

/// End-to-end speedup when a fraction `p` of run time is sped up by `s`.
pub fn amdahl_speedup(p: f64, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("speedup must be positive, got {s}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "fraction must lie in [0, 1], got {p}"
        )));
    }
    Ok(1.0 / ((1.0 - p) + p / s))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::milp::TablePlacement;
    use crate::profiler::{profile, FeatureStats};
    use crate::remap::build_remaps;
    use crate::workload::{generate_trace, FeatureGenSpec, PoolingLaw};

    fn whole(table: u32, gpu: u32, rows: u64) -> TablePlacement {
        TablePlacement {
            table_id: table,
            gpu,
            step: 0,
            hbm_rows: rows,
            pct: 0.0,
            mem_bytes: 0,
        }
    }

    fn plan(placements: Vec<TablePlacement>, m: usize) -> ShardingPlan {
        ShardingPlan {
            strategy: "test".into(),
            step_count: 10,
            placements,
            gpu_costs: vec![0.0; m],
            objective: 0.0,
            lower_bound: 0.0,
            proved_optimal: false,
        }
    }

    fn one_table(k: f64, coverage: f64) -> (Trace, Vec<FeatureStats>) {
        let specs = vec![(
            TableSpec::new(0, 500, 100, 8, 4).unwrap(),
            FeatureGenSpec {
                zipf_exponent: 1.1,
                mean_pooling: k,
                coverage,
                pooling_law: PoolingLaw::Constant,
            },
        )];
        let t = generate_trace(&specs, 1000, 4).unwrap();
        let st = profile(&t, 1.0, 0).unwrap();
        (t, st)
    }

    #[test]
    fn constant_pooling_counts_exactly() {
        let (trace, stats) = one_table(3.0, 1.0);
        let p = plan(vec![whole(0, 0, 40)], 1);
        let remaps = build_remaps(&p, &stats, trace.tables(), false).unwrap();
        let r = simulate(&trace, &p, &remaps, &SystemSpec::default(), 128).unwrap();
        assert_eq!(r.iterations, 7);
        assert_eq!(r.dropped_samples, 1000 - 7 * 128);
        assert_eq!(r.gpus[0].hbm_accesses + r.gpus[0].uvm_accesses, 3.0 * 128.0);
    }

    #[test]
    fn all_hbm_has_no_uvm() {
        let (trace, stats) = one_table(4.0, 0.7);
        let p = plan(vec![whole(0, 0, 100)], 2);
        let remaps = build_remaps(&p, &stats, trace.tables(), false).unwrap();
        let r = simulate(&trace, &p, &remaps, &SystemSpec::default(), 100).unwrap();
        assert_eq!(r.uvm_access_fraction, 0.0);
        assert!(r.max_cost >= r.mean_cost && r.mean_cost >= r.min_cost && r.stddev_cost >= 0.0);
        assert_eq!(r.min_cost, 0.0);
        assert_eq!(r.render_csv().lines().count(), 3);
    }

    #[test]
    fn access_conservation_and_order_invariance() {
        let (trace, stats) = one_table(2.0, 0.9);
        let p = plan(vec![whole(0, 0, 10)], 1);
        let remaps = build_remaps(&p, &stats, trace.tables(), false).unwrap();
        let r = simulate(&trace, &p, &remaps, &SystemSpec::default(), 1000).unwrap();
        assert_eq!(r.total_hbm() + r.total_uvm(), trace.total_ids() as u64);

        // Reverse the order of samples inside the single batch.
        let mut b = Trace::builder(trace.tables().to_vec(), 1000).unwrap();
        let mut recs: Vec<_> = trace.records().collect();
        recs.reverse();
        for rec in &recs {
            b.push(999 - rec.sample_id, rec.table_id, rec.ids).unwrap();
        }
        let shuffled = b.finish();
        let r2 = simulate(&shuffled, &p, &remaps, &SystemSpec::default(), 1000).unwrap();
        assert_eq!(r.gpus, r2.gpus);
    }

    #[test]
    fn missing_table_is_validation_error() {
        let (trace, stats) = one_table(2.0, 0.9);
        let p = plan(vec![whole(0, 0, 10)], 1);
        let remaps = build_remaps(&p, &stats, trace.tables(), false).unwrap();
        let empty = plan(vec![], 1);
        assert!(matches!(
            simulate(&trace, &empty, &remaps, &SystemSpec::default(), 10),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn identical_and_opposite_plans() {
        let specs = vec![
            TableSpec::new(0, 10, 50, 4, 4).unwrap(),
            TableSpec::new(1, 10, 30, 4, 4).unwrap(),
        ];
        let a = plan(vec![whole(0, 0, 20), whole(1, 1, 5)], 2);
        let o = compare_plans(&a, &a, &specs).unwrap();
        assert_eq!((o.uvm_to_hbm, o.hbm_to_uvm), (0.0, 0.0));
        let all_hbm = plan(vec![whole(0, 0, 50), whole(1, 0, 30)], 2);
        let all_uvm = plan(vec![whole(0, 0, 0), whole(1, 0, 0)], 2);
        let o = compare_plans(&all_hbm, &all_uvm, &specs).unwrap();
        assert_eq!(o.uvm_to_hbm, 1.0);
        assert_eq!(o.hbm_to_uvm, 0.0);
    }

    #[test]
    fn amdahl() {
        assert!((amdahl_speedup(0.75, 2.5).unwrap() - 1.82).abs() < 0.005);
        assert!((amdahl_speedup(0.35, 2.5).unwrap() - 1.27).abs() < 0.005);
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(amdahl_speedup(p, 1.0).unwrap(), 1.0);
        }
        assert!(amdahl_speedup(0.5, 0.0).is_err());
        assert!(amdahl_speedup(0.5, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn overlap_matches_set_arithmetic(
            tables in prop::collection::vec((1u64..40, 0.0f64..=1.0, 0.0f64..=1.0, prop::collection::vec(0u64..5, 40)), 1..5)
        ) {
            let mut specs = Vec::new();
            let (mut pa, mut pb, mut stats) = (Vec::new(), Vec::new(), Vec::new());
            for (j, (h, fa, fb, counts)) in tables.iter().enumerate() {
                specs.push(TableSpec::new(j as u32, 10, *h, 4, 4).unwrap());
                stats.push(FeatureStats::from_counts(j as u32, &counts[..*h as usize], 1.0, 1.0).unwrap());
                pa.push(whole(j as u32, 0, (fa * *h as f64) as u64));
                pb.push(whole(j as u32, 0, (fb * *h as f64) as u64));
            }
            let (a, b) = (plan(pa, 1), plan(pb, 1));
            let ra = build_remaps(&a, &stats, &specs, false).unwrap();
            let rb = build_remaps(&b, &stats, &specs, false).unwrap();
            let (mut uvm_b, mut hit1, mut hbm_b, mut hit2) = (0, 0, 0, 0);
            for (x, y) in ra.iter().zip(&rb) {
                let fast = |r: &RemapTable| -> HashSet<u64> {
                    (0..r.hash_size()).filter(|&i| r.tier(i) == Tier::Fast).collect()
                };
                let (fa, fb) = (fast(x), fast(y));
                for i in 0..x.hash_size() {
                    if fb.contains(&i) {
                        hbm_b += 1;
                        if !fa.contains(&i) { hit2 += 1; }
                    } else {
                        uvm_b += 1;
                        if fa.contains(&i) { hit1 += 1; }
                    }
                }
            }
            let o = compare_plans(&a, &b, &specs).unwrap();
            let r = |n: i32, d: i32| if d == 0 { 0.0 } else { n as f64 / d as f64 };
            prop_assert_eq!(o.uvm_to_hbm, r(hit1, uvm_b));
            prop_assert_eq!(o.hbm_to_uvm, r(hit2, hbm_b));
        }
    }
}
