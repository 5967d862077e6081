//! Sharding plans, their text format and an independent validator.
//!
//! ```text
//! #shardplan-plan v1 strategy=<name> steps=<S> gpus=<M> tables=<J>
//! T <table_id> <gpu> <step> <hbm_rows> <pct> <mem_bytes>     (one per table)
//! G <gpu> <cost>                                              (one per GPU)
//! objective <C>
//! lower_bound <LB>
//! proved_optimal <true|false>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::MilpInstance;
use crate::error::{Error, Result};

const MAGIC: &str = "#shardplan-plan v1";

/// Placement of one table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TablePlacement {
    pub table_id: u32,
    pub gpu: u32,
    /// Chosen inverse-CDF step; whole-table plans use `0` (UVM) or `S` (HBM).
    pub step: u32,
    pub hbm_rows: u64,
    /// Fraction of lookups the plan expects HBM to serve.
    pub pct: f64,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardingPlan {
    pub strategy: String,
    pub step_count: u32,
    pub placements: Vec<TablePlacement>,
    /// Modeled cost `c_m` of every GPU.
    pub gpu_costs: Vec<f64>,
    /// `C = max_m c_m`.
    pub objective: f64,
    pub lower_bound: f64,
    pub proved_optimal: bool,
}

/// Which placement rule a plan must follow besides the capacity constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanCheck {
    /// `hbm_rows` is the inverse CDF at `step` and `pct = step / S`.
    Stepped,
    /// Every table lies wholly in HBM (`pct = 1`) or wholly in UVM (`pct = 0`).
    WholeTable,
}

/// Per-GPU modeled costs of arbitrary placements.
pub fn evaluate_placements(instance: &MilpInstance, placements: &[TablePlacement]) -> Vec<f64> {
    let mut costs = vec![0.0; instance.num_gpus()];
    for p in placements {
        let j = p.table_id as usize;
        costs[p.gpu as usize] += instance.coverage(j) * instance.table_cost(j, p.pct);
    }
    costs
}

impl ShardingPlan {
    /// Wraps placements with their recomputed costs.
    pub fn from_placements(
        instance: &MilpInstance,
        strategy: impl Into<String>,
        placements: Vec<TablePlacement>,
        lower_bound: Option<f64>,
        proved_optimal: bool,
    ) -> Self {
        let gpu_costs = evaluate_placements(instance, &placements);
        let objective = gpu_costs.iter().copied().fold(0.0, f64::max);
        ShardingPlan {
            strategy: strategy.into(),
            step_count: instance.step_count(),
            placements,
            gpu_costs,
            objective,
            lower_bound: lower_bound.unwrap_or(objective),
            proved_optimal,
        }
    }

    pub fn num_gpus(&self) -> usize {
        self.gpu_costs.len()
    }

    pub fn placement(&self, table_id: u32) -> Option<&TablePlacement> {
        self.placements.iter().find(|p| p.table_id == table_id)
    }

    /// Relative distance between the objective and its proven lower bound.
    pub fn gap(&self) -> f64 {
        if self.objective <= 0.0 {
            0.0
        } else {
            ((self.objective - self.lower_bound) / self.objective).max(0.0)
        }
    }

    /// Placements of the tables assigned to `gpu`.
    pub fn tables_on(&self, gpu: u32) -> impl Iterator<Item = &TablePlacement> {
        self.placements.iter().filter(move |p| p.gpu == gpu)
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Checks a plan against the instance without trusting any derived field.
pub fn validate_plan(instance: &MilpInstance, plan: &ShardingPlan, check: PlanCheck) -> Result<()> {
    let sys = instance.system();
    let m = instance.num_gpus();
    let j_count = instance.num_tables();
    if plan.gpu_costs.len() != m {
        return Err(Error::validation(format!(
            "plan lists {} GPU costs for {m} GPUs",
            plan.gpu_costs.len()
        )));
    }
    let mut seen = vec![false; j_count];
    for p in &plan.placements {
        let j = p.table_id as usize;
        if j >= j_count {
            return Err(Error::validation(format!("plan places unknown table {j}")));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::validation(format!(
                "table {j} is assigned more than once"
            )));
        }
        if p.gpu as usize >= m {
            return Err(Error::validation(format!(
                "table {j} assigned to missing GPU {}",
                p.gpu
            )));
        }
        let spec = instance.spec(j);
        if p.hbm_rows > spec.hash_size || p.mem_bytes != p.hbm_rows * spec.row_bytes() {
            return Err(Error::validation(format!(
                "table {j}: mem_bytes disagrees with hbm_rows"
            )));
        }
        match check {
            PlanCheck::Stepped => {
                if p.step > instance.step_count() {
                    return Err(Error::validation(format!(
                        "table {j}: step {} out of range",
                        p.step
                    )));
                }
                if p.hbm_rows != instance.icdf(j, p.step) {
                    return Err(Error::validation(format!(
                        "table {j}: hbm_rows {} is not the inverse CDF at step {}",
                        p.hbm_rows, p.step
                    )));
                }
                if p.pct != instance.pct(p.step) {
                    return Err(Error::validation(format!(
                        "table {j}: pct disagrees with step"
                    )));
                }
            }
            PlanCheck::WholeTable => {
                let ok = (p.pct == 1.0 && p.hbm_rows == spec.hash_size)
                    || (p.pct == 0.0 && p.hbm_rows == 0);
                if !ok {
                    return Err(Error::validation(format!(
                        "table {j}: not a whole-table placement"
                    )));
                }
            }
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::validation(format!(
            "table {j} is not assigned to any GPU"
        )));
    }

    let mut hbm = vec![0u128; m];
    let mut uvm = vec![0u128; m];
    for p in &plan.placements {
        let g = p.gpu as usize;
        hbm[g] += p.mem_bytes as u128;
        uvm[g] += (instance.emb_bytes(p.table_id as usize) - p.mem_bytes) as u128;
    }
    for g in 0..m {
        if hbm[g] > sys.cap_hbm_bytes as u128 {
            return Err(Error::validation(format!(
                "GPU {g}: HBM capacity exceeded ({} > {})",
                hbm[g], sys.cap_hbm_bytes
            )));
        }
        if uvm[g] > sys.cap_dram_bytes as u128 {
            return Err(Error::validation(format!(
                "GPU {g}: UVM capacity exceeded ({} > {})",
                uvm[g], sys.cap_dram_bytes
            )));
        }
    }

    let costs = evaluate_placements(instance, &plan.placements);
    for (g, (&a, &b)) in costs.iter().zip(&plan.gpu_costs).enumerate() {
        if !rel_close(a, b, 1e-9) {
            return Err(Error::validation(format!(
                "GPU {g}: reported cost {b} but recomputed {a}"
            )));
        }
    }
    let c = costs.iter().copied().fold(0.0, f64::max);
    if !rel_close(c, plan.objective, 1e-9) {
        return Err(Error::validation(format!(
            "reported objective {} but recomputed {c}",
            plan.objective
        )));
    }
    Ok(())
}

/// Writes `plan` with `header` lines rendered as comments.
pub fn write_plan(path: impl AsRef<Path>, plan: &ShardingPlan, header: &[String]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render(plan, header)).map_err(|e| Error::io(path, e))
}

fn render(plan: &ShardingPlan, header: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{MAGIC} strategy={} steps={} gpus={} tables={}",
        plan.strategy,
        plan.step_count,
        plan.num_gpus(),
        plan.placements.len()
    );
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    let _ = writeln!(s, "# T table_id gpu step hbm_rows pct mem_bytes");
    for p in &plan.placements {
        let _ = writeln!(
            s,
            "T {} {} {} {} {} {}",
            p.table_id, p.gpu, p.step, p.hbm_rows, p.pct, p.mem_bytes
        );
    }
    for (g, c) in plan.gpu_costs.iter().enumerate() {
        let _ = writeln!(s, "G {g} {c}");
    }
    let _ = writeln!(s, "objective {}", plan.objective);
    let _ = writeln!(s, "lower_bound {}", plan.lower_bound);
    let _ = writeln!(s, "proved_optimal {}", plan.proved_optimal);
    s
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<ShardingPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

fn parse(text: &str, path: &Path) -> Result<ShardingPlan> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| perr(1, format!("expected header starting with `{MAGIC}`")))?;
    let mut strategy = None;
    let (mut steps, mut gpus, mut tables) = (None, None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("strategy", v)) => strategy = Some(v.to_string()),
            Some(("steps", v)) => steps = v.parse::<u32>().ok(),
            Some(("gpus", v)) => gpus = v.parse::<usize>().ok(),
            Some(("tables", v)) => tables = v.parse::<usize>().ok(),
            _ => return Err(perr(1, format!("unexpected header field `{field}`"))),
        }
    }
    let (Some(strategy), Some(step_count), Some(gpus), Some(tables)) =
        (strategy, steps, gpus, tables)
    else {
        return Err(perr(
            1,
            "header needs strategy, steps, gpus and tables".into(),
        ));
    };

    let mut placements = Vec::with_capacity(tables);
    let mut gpu_costs = vec![f64::NAN; gpus];
    let (mut objective, mut lower_bound, mut proved) = (None, None, None);
    for (ln, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |k: usize| -> Result<&str> {
            f.get(k)
                .copied()
                .ok_or_else(|| perr(ln, "missing field".into()))
        };
        macro_rules! p {
            ($k:expr, $t:ty) => {
                num($k)?
                    .parse::<$t>()
                    .map_err(|e| perr(ln, format!("field {}: {e}", $k)))?
            };
        }
        match f[0] {
            "T" if f.len() == 7 => placements.push(TablePlacement {
                table_id: p!(1, u32),
                gpu: p!(2, u32),
                step: p!(3, u32),
                hbm_rows: p!(4, u64),
                pct: p!(5, f64),
                mem_bytes: p!(6, u64),
            }),
            "G" if f.len() == 3 => {
                let g = p!(1, usize);
                let slot = gpu_costs
                    .get_mut(g)
                    .ok_or_else(|| perr(ln, format!("GPU {g} beyond gpus={gpus}")))?;
                *slot = p!(2, f64);
            }
            "objective" if f.len() == 2 => objective = Some(p!(1, f64)),
            "lower_bound" if f.len() == 2 => lower_bound = Some(p!(1, f64)),
            "proved_optimal" if f.len() == 2 => proved = Some(p!(1, bool)),
            _ => return Err(perr(ln, format!("unrecognized line `{line}`"))),
        }
    }
    if placements.len() != tables {
        return Err(Error::validation(format!(
            "plan header declares {tables} tables but lists {}",
            placements.len()
        )));
    }
    if let Some(g) = gpu_costs.iter().position(|c| c.is_nan()) {
        return Err(Error::validation(format!(
            "plan has no cost line for GPU {g}"
        )));
    }
    let (Some(objective), Some(lower_bound), Some(proved_optimal)) =
        (objective, lower_bound, proved)
    else {
        return Err(Error::validation(
            "plan footer needs objective, lower_bound and proved_optimal",
        ));
    };
    Ok(ShardingPlan {
        strategy,
        step_count,
        placements,
        gpu_costs,
        objective,
        lower_bound,
        proved_optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_plan() -> ShardingPlan {
        ShardingPlan {
            strategy: "milp".into(),
            step_count: 10,
            placements: vec![
                TablePlacement {
                    table_id: 0,
                    gpu: 1,
                    step: 7,
                    hbm_rows: 33,
                    pct: 0.7,
                    mem_bytes: 528,
                },
                TablePlacement {
                    table_id: 1,
                    gpu: 0,
                    step: 0,
                    hbm_rows: 0,
                    pct: 0.0,
                    mem_bytes: 0,
                },
            ],
            gpu_costs: vec![1.0 / 3.0, 2.5e-7],
            objective: 1.0 / 3.0,
            lower_bound: 0.3,
            proved_optimal: false,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let plan = sample_plan();
        let text = render(&plan, &["tool=test".into()]);
        assert_eq!(parse(&text, Path::new("mem")).unwrap(), plan);
    }

    #[test]
    fn missing_gpu_cost_rejected() {
        let text: String = render(&sample_plan(), &[])
            .lines()
            .filter(|l| !l.starts_with("G 1 "))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            parse(&text, Path::new("mem")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bad_field_reports_line() {
        let text = render(&sample_plan(), &[]).replace("T 1 0 0", "T 1 x 0");
        assert!(matches!(
            parse(&text, Path::new("mem")),
            Err(Error::Parse { line: 4, .. })
        ));
    }
}
