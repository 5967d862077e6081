use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use shardplan_cli::config::{parse_cost, AblationName, StrategyKind};
use shardplan_cli::pipeline::COMPARISON_FILE;
use shardplan_cli::{Bench, CliError, Context, RunConfig, Strategy};
use shardplan_core::milp::LpFormat;
use shardplan_core::CostFunction;

#[derive(Parser)]
#[command(
    name = "shardplan",
    version,
    about = "Embedding-table sharding across HBM and UVM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = |s: &str| s.parse::<StrategyKind>())]
    strategy: Option<StrategyKind>,
    /// Baseline cost function; required for greedy and ldm.
    #[arg(long, global = true, value_parser = parse_cost)]
    cost: Option<CostFunction>,
    #[arg(long, global = true, value_name = "F")]
    sample_rate: Option<f64>,
    /// ICDF step count of the MILP.
    #[arg(long, global = true, value_name = "N")]
    steps: Option<u32>,
    #[arg(long, global = true, value_name = "SECS")]
    time_limit: Option<f64>,
    /// Branch-and-bound node budget.
    #[arg(long, global = true, value_name = "N")]
    node_limit: Option<u64>,
    #[arg(long, global = true, value_parser = |s: &str| s.parse::<AblationName>())]
    ablation: Option<AblationName>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic trace.
    Gen,
    /// Profile the trace into per-table statistics.
    Profile,
    /// Plan a sharding with the configured strategy.
    Plan {
        /// Also export the MILP model in CPLEX LP format.
        #[arg(long, value_enum)]
        lp: Option<LpArg>,
    },
    /// Build remapping tables for a plan.
    Remap,
    /// Replay the trace against a plan and its remaps.
    Simulate,
    /// Compare every plan in the output directory against the MILP plan.
    Compare,
    /// Full pipeline for the MILP and all six baselines.
    Bench,
}

#[derive(Clone, Copy, ValueEnum)]
enum LpArg {
    Bilinear,
    Linearized,
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let Some(path) = &cli.config else {
        return Err(CliError::Usage("--config is required".into()));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.strategy {
        cfg.planner.strategy = s;
        if s != StrategyKind::Milp && cli.cost.is_none() && cfg.planner.cost.is_none() {
            return Err(CliError::Usage(format!(
                "--strategy {} requires --cost",
                s.name()
            )));
        }
    }
    if let Some(c) = cli.cost {
        cfg.planner.cost = Some(c);
    }
    if let Some(r) = cli.sample_rate {
        cfg.profiling.sample_rate = r;
    }
    if let Some(n) = cli.steps {
        cfg.planner.step_count = n;
    }
    if let Some(t) = cli.time_limit {
        cfg.planner.time_limit = Some(t);
    }
    if let Some(n) = cli.node_limit {
        cfg.planner.node_limit = Some(n);
    }
    if let Some(a) = cli.ablation {
        cfg.planner.ablation = a;
    }
    Context::new(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Gen => {
            let trace = ctx.generate()?;
            let path = ctx.write_trace(&trace)?;
            println!("{}", path.display());
        }
        Command::Profile => {
            let trace = ctx.load_trace()?;
            let stats = ctx.profile(&trace)?;
            println!("{}", ctx.write_stats(&stats)?.display());
        }
        Command::Plan { lp } => {
            let strategy = Strategy::from_planner(&ctx.config.planner)?;
            let specs = ctx.table_specs()?;
            let stats = ctx.load_stats()?;
            if let (Some(fmt), Strategy::Milp(ab)) = (lp, strategy) {
                let fmt = match fmt {
                    LpArg::Bilinear => LpFormat::Bilinear,
                    LpArg::Linearized => LpFormat::Linearized,
                };
                println!(
                    "{}",
                    ctx.export_lp(&specs, &stats, ab, &strategy.label(), fmt)?
                        .display()
                );
            }
            let plan = ctx.plan(&specs, &stats, strategy)?;
            println!("{}", ctx.write_plan(&plan)?.display());
        }
        Command::Remap => {
            let strategy = Strategy::from_planner(&ctx.config.planner)?;
            let trace = ctx.load_trace()?;
            let stats = ctx.profile(&trace)?;
            let plan = ctx.load_plan(&strategy.label())?;
            let remaps = ctx.remaps(&trace, &stats, &plan)?;
            println!("{}", ctx.write_remaps(&plan.strategy, &remaps)?.display());
        }
        Command::Simulate => {
            let strategy = Strategy::from_planner(&ctx.config.planner)?;
            let trace = ctx.load_trace()?;
            let plan = ctx.load_plan(&strategy.label())?;
            let remaps = ctx.load_remaps(&strategy.label(), trace.tables())?;
            let report = ctx.simulate(&trace, &plan, &remaps)?;
            ctx.write_report(&report)?;
            print!("{}", report.render_text());
        }
        Command::Compare => {
            let trace = ctx.load_trace()?;
            let stats = ctx.profile(&trace)?;
            let mut runs = Vec::new();
            for strategy in Strategy::bench_set() {
                let label = strategy.label();
                if !ctx.plan_file(&label).exists() {
                    if strategy.is_milp() {
                        return Err(CliError::Missing {
                            path: ctx.plan_file(&label),
                            hint: "run `shardplan plan` first",
                        });
                    }
                    continue;
                }
                runs.push(ctx.evaluate(&trace, &stats, strategy, ctx.load_plan(&label)?)?);
            }
            let bench = Bench::new(runs, trace.tables())?;
            ctx.write_comparison(&bench)?;
            print!("{}", bench.render_comparison());
        }
        Command::Bench => {
            let trace = if ctx.config.workload.trace.is_some() {
                ctx.load_trace()?
            } else {
                let t = ctx.generate()?;
                ctx.write_trace(&t)?;
                t
            };
            let stats = ctx.profile(&trace)?;
            ctx.write_stats(&stats)?;
            let bench = ctx.run_all(&trace, &stats, &Strategy::bench_set())?;
            ctx.write_bench(&bench)?;
            print!("{}", bench.render_comparison());
            eprintln!("wrote {}", ctx.out_path(COMPARISON_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => Cli::command()
            .error(ErrorKind::MissingRequiredArgument, msg)
            .exit(),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
