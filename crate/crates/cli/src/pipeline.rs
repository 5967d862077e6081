//! Stage functions shared by the subcommands.
//!
//! Every stage is a deterministic function of the configuration and of the
//! artifacts of earlier stages. Artifact names inside the output directory:
//!
//! ```text
//! trace.txt.gz                  gen
//! stats.toml                    profile
//! plan-<label>.txt              plan
//! model-<label>.lp              plan --lp
//! remap-<label>/table-<j>.bin   remap, with remap-<label>/manifest.toml
//! sim-<label>.txt, .csv         simulate
//! comparison.txt                compare, bench
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;

use shardplan_core::milp::{
    build_instance, export_lp, read_plan, write_plan, LpFormat, MilpInstance,
};
use shardplan_core::profiler::{read_stats, write_stats};
use shardplan_core::sim::{compare_plans, PlanOverlap};
use shardplan_core::workload::{read_trace, write_trace_with_comments};
use shardplan_core::{
    baseline_plan, build_remaps, generate_trace, profile, simulate, solve, CostFunction,
    FeatureStats, Heuristic, RemapTable, ShardingPlan, SimReport, SolveOptions, SystemSpec,
    TableSpec, Trace,
};

use crate::config::{AblationName, PlannerConfig, RunConfig, StrategyKind};
use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const TRACE_FILE: &str = "trace.txt.gz";
pub const STATS_FILE: &str = "stats.toml";
pub const COMPARISON_FILE: &str = "comparison.txt";

/// One planner configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Milp(AblationName),
    Baseline(Heuristic, CostFunction),
}

impl Strategy {
    /// Exact planner followed by the six baselines.
    pub fn bench_set() -> Vec<Strategy> {
        let mut v = vec![Strategy::Milp(AblationName::Full)];
        for h in Heuristic::ALL {
            for c in CostFunction::ALL {
                v.push(Strategy::Baseline(h, c));
            }
        }
        v
    }

    pub fn from_planner(p: &PlannerConfig) -> Result<Strategy, CliError> {
        let h = match p.strategy {
            StrategyKind::Milp => return Ok(Strategy::Milp(p.ablation)),
            StrategyKind::Greedy => Heuristic::Greedy,
            StrategyKind::Ldm => Heuristic::Ldm,
        };
        let cost = p.cost.ok_or_else(|| {
            CliError::Invalid(format!(
                "planner.cost is required when planner.strategy is {}",
                p.strategy.name()
            ))
        })?;
        Ok(Strategy::Baseline(h, cost))
    }

    /// Name used in file names and reports.
    pub fn label(&self) -> String {
        match self {
            Strategy::Milp(AblationName::Full) => "milp".into(),
            Strategy::Milp(a) => format!("milp-{}", a.name()),
            Strategy::Baseline(h, c) => format!("{}-{}", h.name(), c.name()),
        }
    }

    pub fn is_milp(&self) -> bool {
        matches!(self, Strategy::Milp(_))
    }
}

/// Configuration plus its hash.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    hash: String,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        config.validate().map_err(CliError::Invalid)?;
        let hash = config.hash();
        Ok(Context { config, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn system(&self) -> SystemSpec {
        self.config.system.spec()
    }

    /// Comment lines identifying the tool, configuration and seeds.
    pub fn header(&self, artifact: &str) -> Vec<String> {
        vec![
            format!("shardplan {TOOL_VERSION} {artifact}"),
            format!("config_sha256 {}", self.hash),
            format!(
                "seed {} trace_seed {} profile_seed {}",
                self.config.seed,
                self.config.trace_seed(),
                self.config.profile_seed()
            ),
        ]
    }

    fn ensure_out_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(self.out_dir()).map_err(|e| CliError::io(self.out_dir(), e))
    }

    fn write_text(&self, name: &str, header: &[String], body: &str) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let path = self.out_path(name);
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        s.push_str(body);
        fs::write(&path, s).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn generate(&self) -> Result<Trace, CliError> {
        if self.config.workload.trace.is_some() {
            return Err(CliError::Invalid(
                "workload.trace is set; there is nothing to generate".into(),
            ));
        }
        let specs = self.config.table_specs()?;
        Ok(generate_trace(
            &specs,
            self.config.workload.num_samples,
            self.config.trace_seed(),
        )?)
    }

    pub fn write_trace(&self, trace: &Trace) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let path = self.out_path(TRACE_FILE);
        write_trace_with_comments(trace, &path, &self.header("trace"))?;
        Ok(path)
    }

    /// The configured trace file, or the one written by `gen`.
    pub fn load_trace(&self) -> Result<Trace, CliError> {
        let path = match &self.config.workload.trace {
            Some(p) => p.clone(),
            None => self.out_path(TRACE_FILE),
        };
        if !path.exists() {
            return Err(CliError::Missing {
                path,
                hint: "run `shardplan gen` first",
            });
        }
        Ok(read_trace(&path)?)
    }

    pub fn profile(&self, trace: &Trace) -> Result<Vec<FeatureStats>, CliError> {
        Ok(profile(
            trace,
            self.config.profiling.sample_rate,
            self.config.profile_seed(),
        )?)
    }

    pub fn write_stats(&self, stats: &[FeatureStats]) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let path = self.out_path(STATS_FILE);
        let mut header = self.header("stats");
        header.push(format!("sample_rate {}", self.config.profiling.sample_rate));
        write_stats(&path, stats, &header)?;
        Ok(path)
    }

    pub fn load_stats(&self) -> Result<Vec<FeatureStats>, CliError> {
        let path = self.out_path(STATS_FILE);
        if !path.exists() {
            return Err(CliError::Missing {
                path,
                hint: "run `shardplan profile` first",
            });
        }
        Ok(read_stats(&path)?)
    }

    pub fn instance(
        &self,
        specs: &[TableSpec],
        stats: &[FeatureStats],
        ablation: AblationName,
    ) -> Result<MilpInstance, CliError> {
        let p = &self.config.planner;
        let inst = build_instance(
            stats,
            specs,
            self.system(),
            ablation.ablation(),
            p.step_count,
        )?;
        Ok(inst.with_aggregation(p.aggregation))
    }

    pub fn solve_options(&self) -> SolveOptions {
        let p = &self.config.planner;
        SolveOptions {
            time_limit: p.time_limit.map(Duration::from_secs_f64),
            node_limit: p.node_limit,
        }
    }

    pub fn plan(
        &self,
        specs: &[TableSpec],
        stats: &[FeatureStats],
        strategy: Strategy,
    ) -> Result<ShardingPlan, CliError> {
        match strategy {
            Strategy::Milp(ab) => {
                let inst = self.instance(specs, stats, ab)?;
                let mut plan = solve(&inst, &self.solve_options())?;
                plan.strategy = strategy.label();
                if !plan.proved_optimal {
                    log::info!(
                        "{}: search budget reached, objective {:.6e} lower bound {:.6e}",
                        plan.strategy,
                        plan.objective,
                        plan.lower_bound
                    );
                }
                Ok(plan)
            }
            Strategy::Baseline(h, c) => {
                let inst = self.instance(specs, stats, AblationName::Full)?;
                Ok(baseline_plan(&inst, h, c)?)
            }
        }
    }

    pub fn plan_file(&self, label: &str) -> PathBuf {
        self.out_path(&format!("plan-{label}.txt"))
    }

    pub fn write_plan(&self, plan: &ShardingPlan) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let path = self.plan_file(&plan.strategy);
        write_plan(&path, plan, &self.header("plan"))?;
        Ok(path)
    }

    pub fn load_plan(&self, label: &str) -> Result<ShardingPlan, CliError> {
        let path = self.plan_file(label);
        if !path.exists() {
            return Err(CliError::Missing {
                path,
                hint: "run `shardplan plan` first",
            });
        }
        Ok(read_plan(&path)?)
    }

    pub fn export_lp(
        &self,
        specs: &[TableSpec],
        stats: &[FeatureStats],
        ablation: AblationName,
        label: &str,
        format: LpFormat,
    ) -> Result<PathBuf, CliError> {
        self.ensure_out_dir()?;
        let inst = self.instance(specs, stats, ablation)?;
        let path = self.out_path(&format!("model-{label}.lp"));
        export_lp(&inst, &path, format, &self.header("lp"))?;
        Ok(path)
    }

    pub fn remaps(
        &self,
        trace: &Trace,
        stats: &[FeatureStats],
        plan: &ShardingPlan,
    ) -> Result<Vec<RemapTable>, CliError> {
        Ok(build_remaps(plan, stats, trace.tables(), false)?)
    }

    /// Writes one binary file per table and a manifest carrying the header.
    pub fn write_remaps(&self, label: &str, remaps: &[RemapTable]) -> Result<PathBuf, CliError> {
        let dir = self.out_path(&format!("remap-{label}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut manifest = Manifest {
            tool: format!("shardplan {TOOL_VERSION}"),
            config_sha256: self.hash.clone(),
            seed: self.config.seed,
            strategy: label.to_string(),
            table: Vec::with_capacity(remaps.len()),
        };
        for r in remaps {
            let file = format!("table-{:04}.bin", r.table_id());
            r.write(dir.join(&file))?;
            manifest.table.push(ManifestEntry {
                table_id: r.table_id(),
                hash_size: r.hash_size(),
                hbm_rows: r.hbm_rows(),
                file,
            });
        }
        let mut body = String::new();
        for h in self.header("remap manifest") {
            let _ = writeln!(body, "# {h}");
        }
        body.push_str(&toml::to_string(&manifest).expect("manifest serializes"));
        let path = dir.join("manifest.toml");
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        Ok(dir)
    }

    /// Reads the remaps written by [`Context::write_remaps`] for `specs`.
    pub fn load_remaps(
        &self,
        label: &str,
        specs: &[TableSpec],
    ) -> Result<Vec<RemapTable>, CliError> {
        let dir = self.out_path(&format!("remap-{label}"));
        if !dir.is_dir() {
            return Err(CliError::Missing {
                path: dir,
                hint: "run `shardplan remap` first",
            });
        }
        specs
            .iter()
            .map(|s| {
                Ok(RemapTable::read(
                    dir.join(format!("table-{:04}.bin", s.table_id)),
                )?)
            })
            .collect()
    }

    /// Table specs from the configuration, or from the trace file when one is configured.
    pub fn table_specs(&self) -> Result<Vec<TableSpec>, CliError> {
        if self.config.workload.trace.is_some() {
            Ok(self.load_trace()?.tables().to_vec())
        } else {
            Ok(self
                .config
                .table_specs()?
                .into_iter()
                .map(|(t, _)| t)
                .collect())
        }
    }

    pub fn simulate(
        &self,
        trace: &Trace,
        plan: &ShardingPlan,
        remaps: &[RemapTable],
    ) -> Result<SimReport, CliError> {
        let sys = self.system();
        Ok(simulate(trace, plan, remaps, &sys, sys.batch_size)?)
    }

    pub fn write_report(&self, report: &SimReport) -> Result<(), CliError> {
        let header = self.header("sim");
        let label = &report.strategy;
        self.write_text(&format!("sim-{label}.txt"), &header, &report.render_text())?;
        self.write_text(&format!("sim-{label}.csv"), &header, &report.render_csv())?;
        Ok(())
    }

    /// Plans, remaps and simulates every strategy of `strategies` on one trace.
    pub fn run_all(
        &self,
        trace: &Trace,
        stats: &[FeatureStats],
        strategies: &[Strategy],
    ) -> Result<Bench, CliError> {
        let runs = strategies
            .par_iter()
            .map(|&strategy| {
                let plan = self.plan(trace.tables(), stats, strategy)?;
                self.evaluate(trace, stats, strategy, plan)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Bench::new(runs, trace.tables())
    }

    /// Remaps and simulates an existing plan.
    pub fn evaluate(
        &self,
        trace: &Trace,
        stats: &[FeatureStats],
        strategy: Strategy,
        plan: ShardingPlan,
    ) -> Result<BenchRun, CliError> {
        let remaps = self.remaps(trace, stats, &plan)?;
        let report = self.simulate(trace, &plan, &remaps)?;
        Ok(BenchRun {
            strategy,
            plan,
            remaps,
            report,
            overlap: None,
        })
    }

    /// Writes the plans, remaps, reports and comparison of a bench run.
    pub fn write_bench(&self, bench: &Bench) -> Result<(), CliError> {
        for run in &bench.runs {
            self.write_plan(&run.plan)?;
            self.write_remaps(&run.plan.strategy, &run.remaps)?;
            self.write_report(&run.report)?;
        }
        self.write_comparison(bench)?;
        Ok(())
    }

    pub fn write_comparison(&self, bench: &Bench) -> Result<PathBuf, CliError> {
        self.write_text(
            COMPARISON_FILE,
            &self.header("comparison"),
            &bench.render_comparison(),
        )
    }
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    config_sha256: String,
    seed: u64,
    strategy: String,
    table: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    table_id: u32,
    hash_size: u64,
    hbm_rows: u64,
    file: String,
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub strategy: Strategy,
    pub plan: ShardingPlan,
    pub remaps: Vec<RemapTable>,
    pub report: SimReport,
    /// Row disagreement with the reference plan (the first run).
    pub overlap: Option<PlanOverlap>,
}

/// Results of several strategies on the same trace; the first run is the reference.
#[derive(Debug, Clone)]
pub struct Bench {
    pub runs: Vec<BenchRun>,
}

impl Bench {
    pub fn new(mut runs: Vec<BenchRun>, specs: &[TableSpec]) -> Result<Self, CliError> {
        if runs.is_empty() {
            return Err(CliError::Invalid("no strategies to compare".into()));
        }
        let reference = runs[0].plan.clone();
        for run in runs.iter_mut().skip(1) {
            run.overlap = Some(compare_plans(&reference, &run.plan, specs)?);
        }
        Ok(Bench { runs })
    }

    pub fn run(&self, label: &str) -> Option<&BenchRun> {
        self.runs.iter().find(|r| r.plan.strategy == label)
    }

    /// Baseline run with the smallest simulated max per-GPU cost.
    pub fn best_baseline(&self) -> Option<&BenchRun> {
        self.runs
            .iter()
            .filter(|r| !r.strategy.is_milp())
            .min_by(|a, b| a.report.max_cost.total_cmp(&b.report.max_cost))
    }

    pub fn render_comparison(&self) -> String {
        let reference = &self.runs[0].plan.strategy;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>12} {:>12} {:>12} {:>12} {:>10} {:>14} {:>14} {:>10} {:>10}",
            "strategy",
            "max_cost_s",
            "mean_cost_s",
            "min_cost_s",
            "stddev_s",
            "uvm_frac",
            "hbm_acc/iter",
            "uvm_acc/iter",
            "uvm->hbm",
            "hbm->uvm"
        );
        for r in &self.runs {
            let rep = &r.report;
            let m = rep.gpus.len() as f64;
            let hbm = rep.gpus.iter().map(|g| g.hbm_accesses).sum::<f64>() / m;
            let uvm = rep.gpus.iter().map(|g| g.uvm_accesses).sum::<f64>() / m;
            let (a, b) = match r.overlap {
                Some(o) => (
                    format!("{:.4}", o.uvm_to_hbm),
                    format!("{:.4}", o.hbm_to_uvm),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{:<18} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>10.6} {:>14.1} {:>14.1} {:>10} {:>10}",
                r.plan.strategy, rep.max_cost, rep.mean_cost, rep.min_cost, rep.stddev_cost, rep.uvm_access_fraction, hbm, uvm, a, b
            );
        }
        let _ = writeln!(
            s,
            "uvm->hbm: share of rows a strategy keeps in UVM that {reference} keeps in HBM; hbm->uvm: the reverse"
        );
        s
    }
}
