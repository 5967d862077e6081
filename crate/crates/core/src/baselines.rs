//! Whole-table baseline sharders.
//!
//! A fixed per-table cost (size, lookup volume, or both) drives either a
//! greedy list-scheduling pass or Karmarkar-Karp differencing. Neither looks
//! at the access CDF: a table lives entirely in HBM or entirely in UVM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milp::{MilpInstance, ShardingPlan, SystemSpec, TablePlacement};
use crate::profiler::FeatureStats;
use crate::workload::TableSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostFunction {
    /// `hash_size * dim`.
    Size,
    /// `avg_pooling * dim`.
    Lookup,
    /// `avg_pooling * dim * log10(hash_size)`.
    #[serde(rename = "size-lookup")]
    SizeAndLookup,
}

impl CostFunction {
    pub const ALL: [CostFunction; 3] = [
        CostFunction::Size,
        CostFunction::Lookup,
        CostFunction::SizeAndLookup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostFunction::Size => "size",
            CostFunction::Lookup => "lookup",
            CostFunction::SizeAndLookup => "size-lookup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    Greedy,
    Ldm,
}

impl Heuristic {
    pub const ALL: [Heuristic; 2] = [Heuristic::Greedy, Heuristic::Ldm];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Greedy => "greedy",
            Heuristic::Ldm => "ldm",
        }
    }
}

pub fn table_fixed_cost(spec: &TableSpec, stats: &FeatureStats, kind: CostFunction) -> f64 {
    let dim = spec.dim as f64;
    match kind {
        CostFunction::Size => spec.hash_size as f64 * dim,
        CostFunction::Lookup => stats.avg_pooling * dim,
        CostFunction::SizeAndLookup => {
            if spec.hash_size < 10 {
                log::warn!(
                    "table {}: hash size {} below 10, log factor clamped at {:.3}",
                    spec.table_id,
                    spec.hash_size,
                    (spec.hash_size as f64).log10().max(0.0)
                );
            }
            stats.avg_pooling * dim * (spec.hash_size as f64).log10().max(0.0)
        }
    }
}

/// Where a baseline put one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WholeTable {
    pub gpu: u32,
    pub in_hbm: bool,
}

fn check_inputs(costs: &[f64], specs: &[TableSpec], system: &SystemSpec) -> Result<()> {
    if costs.len() != specs.len() {
        return Err(Error::invalid(format!(
            "{} costs for {} tables",
            costs.len(),
            specs.len()
        )));
    }
    if let Some(j) = costs.iter().position(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::invalid(format!(
            "table {j}: cost must be finite and non-negative"
        )));
    }
    system.validate()?;
    let total: u128 = specs.iter().map(|s| s.table_bytes() as u128).sum();
    let cap =
        system.num_gpus as u128 * (system.cap_hbm_bytes as u128 + system.cap_dram_bytes as u128);
    if total > cap {
        return Err(Error::Infeasible(format!(
            "aggregate capacity: tables need {total} bytes but the node holds {cap}"
        )));
    }
    Ok(())
}

/// Table indices by descending cost, ties by ascending id.
fn by_cost(costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    order
}

fn lowest(sums: &[f64], ok: impl Fn(usize) -> bool) -> Option<usize> {
    (0..sums.len())
        .filter(|&g| ok(g))
        .min_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)))
}

/// Greedy list scheduling with an HBM phase followed by a UVM phase.
///
/// Tables go out in descending cost. The first `M` take one GPU each; later
/// ones join the GPU with the smallest HBM cost sum whose HBM still has room.
/// The first table that fits no HBM, and every table after it, goes to the
/// UVM of the GPU with the smallest UVM cost sum (costs scaled by
/// `bw_hbm / bw_uvm`) that still has room.
pub fn greedy_shard(
    costs: &[f64],
    specs: &[TableSpec],
    system: &SystemSpec,
) -> Result<Vec<WholeTable>> {
    check_inputs(costs, specs, system)?;
    let m = system.num_gpus as usize;
    let slow = system.bw_hbm / system.bw_uvm;
    let mut out = vec![
        WholeTable {
            gpu: 0,
            in_hbm: false
        };
        specs.len()
    ];
    let mut hbm_sum = vec![0.0; m];
    let mut uvm_sum = vec![0.0; m];
    let mut hbm_used = vec![0u64; m];
    let mut uvm_used = vec![0u64; m];
    let mut hbm_phase = true;
    for (k, &j) in by_cost(costs).iter().enumerate() {
        let bytes = specs[j].table_bytes();
        if hbm_phase {
            let fits = |g: usize| hbm_used[g] + bytes <= system.cap_hbm_bytes;
            let pick = if k < m {
                fits(k).then_some(k)
            } else {
                lowest(&hbm_sum, fits)
            };
            match pick {
                Some(g) => {
                    hbm_used[g] += bytes;
                    hbm_sum[g] += costs[j];
                    out[j] = WholeTable {
                        gpu: g as u32,
                        in_hbm: true,
                    };
                    continue;
                }
                None => hbm_phase = false,
            }
        }
        let g = lowest(&uvm_sum, |g| uvm_used[g] + bytes <= system.cap_dram_bytes).ok_or_else(
            || {
                Error::Infeasible(format!(
                    "table {j} ({bytes} bytes) fits neither HBM nor UVM of any GPU"
                ))
            },
        )?;
        uvm_used[g] += bytes;
        uvm_sum[g] += costs[j] * slow;
        out[j] = WholeTable {
            gpu: g as u32,
            in_hbm: false,
        };
    }
    Ok(out)
}

/// Partial partition: `M` subsets, largest sum first.
#[derive(Debug, Clone)]
struct Tuple {
    subsets: Vec<(f64, Vec<usize>)>,
    min_id: usize,
}

impl Tuple {
    fn spread(&self) -> f64 {
        self.subsets[0].0 - self.subsets[self.subsets.len() - 1].0
    }

    fn sort(&mut self) {
        self.subsets.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.iter().min().cmp(&b.1.iter().min()))
        });
    }
}

/// Karmarkar-Karp differencing into `m` subsets; returns the tables of each
/// subset, largest sum first.
pub fn ldm_partition(costs: &[f64], m: usize) -> Vec<Vec<usize>> {
    assert!(m >= 1);
    let mut list: Vec<Tuple> = costs
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let mut subsets = vec![(0.0, Vec::new()); m];
            subsets[0] = (c, vec![j]);
            Tuple { subsets, min_id: j }
        })
        .collect();
    if list.is_empty() {
        return vec![Vec::new(); m];
    }
    while list.len() > 1 {
        // The two tuples with the largest spread, ties by smallest member id.
        let mut idx: Vec<usize> = (0..list.len()).collect();
        idx.sort_by(|&a, &b| {
            list[b]
                .spread()
                .total_cmp(&list[a].spread())
                .then(list[a].min_id.cmp(&list[b].min_id))
        });
        let (ia, ib) = (idx[0].min(idx[1]), idx[0].max(idx[1]));
        let b = list.swap_remove(ib);
        let a = list.swap_remove(ia);
        let mut merged = Tuple {
            subsets: a
                .subsets
                .into_iter()
                .zip(b.subsets.into_iter().rev())
                .map(|((sa, mut ta), (sb, tb))| {
                    ta.extend(tb);
                    (sa + sb, ta)
                })
                .collect(),
            min_id: a.min_id.min(b.min_id),
        };
        merged.sort();
        list.push(merged);
    }
    list.pop()
        .unwrap()
        .subsets
        .into_iter()
        .map(|(_, t)| t)
        .collect()
}

/// Differencing partition followed by per-GPU HBM filling in descending
/// cost; once a table misses HBM, it and the rest of that GPU go to UVM.
pub fn ldm_shard(
    costs: &[f64],
    specs: &[TableSpec],
    system: &SystemSpec,
) -> Result<Vec<WholeTable>> {
    check_inputs(costs, specs, system)?;
    let parts = ldm_partition(costs, system.num_gpus as usize);
    let mut out = vec![
        WholeTable {
            gpu: 0,
            in_hbm: false
        };
        specs.len()
    ];
    for (g, mut tables) in parts.into_iter().enumerate() {
        tables.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
        let (mut hbm, mut uvm) = (0u64, 0u64);
        let mut hbm_phase = true;
        for j in tables {
            let bytes = specs[j].table_bytes();
            if hbm_phase && hbm + bytes <= system.cap_hbm_bytes {
                hbm += bytes;
                out[j] = WholeTable {
                    gpu: g as u32,
                    in_hbm: true,
                };
                continue;
            }
            hbm_phase = false;
            if uvm + bytes > system.cap_dram_bytes {
                return Err(Error::Infeasible(format!(
                    "table {j} ({bytes} bytes) overflows the UVM of GPU {g} in the differencing partition"
                )));
            }
            uvm += bytes;
            out[j] = WholeTable {
                gpu: g as u32,
                in_hbm: false,
            };
        }
    }
    Ok(out)
}

/// Turns whole-table decisions into a plan costed by `instance`'s model.
pub fn whole_table_plan(
    instance: &MilpInstance,
    strategy: &str,
    tables: &[WholeTable],
) -> ShardingPlan {
    let s = instance.step_count();
    let placements = tables
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let spec = instance.spec(j);
            let rows = if w.in_hbm { spec.hash_size } else { 0 };
            TablePlacement {
                table_id: j as u32,
                gpu: w.gpu,
                step: if w.in_hbm { s } else { 0 },
                hbm_rows: rows,
                pct: if w.in_hbm { 1.0 } else { 0.0 },
                mem_bytes: rows * spec.row_bytes(),
            }
        })
        .collect();
    ShardingPlan::from_placements(instance, strategy, placements, None, false)
}

/// Runs one of the six baseline combinations on `instance`.
pub fn baseline_plan(
    instance: &MilpInstance,
    heuristic: Heuristic,
    kind: CostFunction,
) -> Result<ShardingPlan> {
    let specs: Vec<TableSpec> = instance.tables().iter().map(|(s, _)| *s).collect();
    let costs: Vec<f64> = instance
        .tables()
        .iter()
        .map(|(spec, st)| table_fixed_cost(spec, st, kind))
        .collect();
    let tables = match heuristic {
        Heuristic::Greedy => greedy_shard(&costs, &specs, instance.system())?,
        Heuristic::Ldm => ldm_shard(&costs, &specs, instance.system())?,
    };
    let name = format!("{}-{}", heuristic.name(), kind.name());
    Ok(whole_table_plan(instance, &name, &tables))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn roomy(m: u32, n: usize) -> (Vec<TableSpec>, SystemSpec) {
        let specs = (0..n as u32)
            .map(|j| TableSpec::new(j, 10, 10, 4, 4).unwrap())
            .collect();
        let sys = SystemSpec {
            num_gpus: m,
            cap_hbm_bytes: 1 << 30,
            cap_dram_bytes: 1 << 30,
            ..SystemSpec::default()
        };
        (specs, sys)
    }

    fn sums(out: &[WholeTable], costs: &[f64], m: usize) -> Vec<f64> {
        let mut s = vec![0.0; m];
        for (w, c) in out.iter().zip(costs) {
            s[w.gpu as usize] += c;
        }
        s
    }

    #[test]
    fn fixed_costs() {
        let spec = TableSpec::new(0, 10, 1_000_000, 64, 4).unwrap();
        let st = FeatureStats::from_counts(0, &[1], 1.0, 20.0).unwrap();
        assert_eq!(table_fixed_cost(&spec, &st, CostFunction::Size), 6.4e7);
        assert_eq!(table_fixed_cost(&spec, &st, CostFunction::Lookup), 1280.0);
        assert!((table_fixed_cost(&spec, &st, CostFunction::SizeAndLookup) - 7680.0).abs() < 1e-9);
        let tiny = TableSpec::new(0, 10, 1, 64, 4).unwrap();
        assert_eq!(
            table_fixed_cost(&tiny, &st, CostFunction::SizeAndLookup),
            0.0
        );
    }

    #[test]
    fn greedy_hand_example() {
        let costs = [8.0, 7.0, 6.0, 5.0, 4.0];
        let (specs, sys) = roomy(2, 5);
        let out = greedy_shard(&costs, &specs, &sys).unwrap();
        assert_eq!(sums(&out, &costs, 2), vec![17.0, 13.0]);
        let gpu0: Vec<usize> = (0..5).filter(|&j| out[j].gpu == 0).collect();
        assert_eq!(gpu0, vec![0, 3, 4]);
    }

    #[test]
    fn ldm_hand_example() {
        let costs = [8.0, 7.0, 6.0, 5.0, 4.0];
        let mut parts = ldm_partition(&costs, 2);
        for p in &mut parts {
            p.sort();
        }
        assert_eq!(parts, vec![vec![1, 3, 4], vec![0, 2]]);
        let (specs, sys) = roomy(2, 5);
        let out = ldm_shard(&costs, &specs, &sys).unwrap();
        let mut s = sums(&out, &costs, 2);
        s.sort_by(f64::total_cmp);
        assert_eq!(s, vec![14.0, 16.0]);
    }

    #[test]
    fn ldm_trivial_cases() {
        assert_eq!(ldm_partition(&[3.0], 2), vec![vec![0], vec![]]);
        let parts = ldm_partition(&[5.0, 5.0], 2);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn one_table_per_gpu_when_counts_match() {
        let (specs, sys) = roomy(4, 4);
        let out = greedy_shard(&[1.0; 4], &specs, &sys).unwrap();
        let mut gpus: Vec<u32> = out.iter().map(|w| w.gpu).collect();
        gpus.sort();
        assert_eq!(gpus, vec![0, 1, 2, 3]);
    }

    #[test]
    fn equal_costs_balance_counts() {
        for n in 1..30 {
            let (specs, sys) = roomy(4, n);
            let out = greedy_shard(&vec![2.5; n], &specs, &sys).unwrap();
            let mut count = [0usize; 4];
            for w in &out {
                count[w.gpu as usize] += 1;
            }
            assert!(count.iter().max().unwrap() - count.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn overflow_goes_to_uvm() {
        let specs: Vec<TableSpec> = (0..3)
            .map(|j| TableSpec::new(j, 10, 10, 4, 4).unwrap())
            .collect();
        let sys = SystemSpec {
            num_gpus: 1,
            cap_hbm_bytes: 200,
            cap_dram_bytes: 1000,
            ..SystemSpec::default()
        };
        for f in [greedy_shard, ldm_shard] {
            let out = f(&[3.0, 2.0, 1.0], &specs, &sys).unwrap();
            assert_eq!(
                out.iter().map(|w| w.in_hbm).collect::<Vec<_>>(),
                vec![true, false, false]
            );
        }
    }

    #[test]
    fn infeasible_names_the_table() {
        let specs: Vec<TableSpec> = (0..2)
            .map(|j| TableSpec::new(j, 10, 10, 4, 4).unwrap())
            .collect();
        let sys = SystemSpec {
            num_gpus: 1,
            cap_hbm_bytes: 100,
            cap_dram_bytes: 230,
            ..SystemSpec::default()
        };
        match greedy_shard(&[1.0, 2.0], &specs, &sys) {
            Err(Error::Infeasible(m)) => assert!(m.contains("table 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ldm_usually_beats_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut wins = 0;
        for _ in 0..1000 {
            let m = rng.random_range(2..=6u32);
            let n = rng.random_range(m as usize..30);
            let costs: Vec<f64> = (0..n)
                .map(|_| rng.random_range(1.0..1000.0f64).round())
                .collect();
            let (specs, sys) = roomy(m, n);
            let g = sums(
                &greedy_shard(&costs, &specs, &sys).unwrap(),
                &costs,
                m as usize,
            );
            let l = sums(
                &ldm_shard(&costs, &specs, &sys).unwrap(),
                &costs,
                m as usize,
            );
            let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
            if max(&l) <= max(&g) {
                wins += 1;
            }
        }
        assert!(wins >= 800, "ldm no worse on only {wins} of 1000");
    }

    #[test]
    fn deterministic() {
        let costs = [3.0, 3.0, 1.0, 7.0, 7.0, 2.0];
        let (specs, sys) = roomy(3, 6);
        assert_eq!(
            greedy_shard(&costs, &specs, &sys).unwrap(),
            greedy_shard(&costs, &specs, &sys).unwrap()
        );
        assert_eq!(
            ldm_shard(&costs, &specs, &sys).unwrap(),
            ldm_shard(&costs, &specs, &sys).unwrap()
        );
    }
}
