//! `adl-lab` command-line driver.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 infeasible ADL budget,
//! 4 data-quality failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adl_lab::metrics;
use adl_lab::policies::Numeraire;
use adl_lab::replay::{self, BenchmarkPolicy, ReplayConfig};
use adl_lab::scenario::{self, ScenarioConfig};
use adl_lab::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "adl-lab", version, about = "Liquidation, insurance-fund and ADL experiments")]
struct Cli {
    /// Worker threads for seed-parallel work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the scenario seed.
    #[arg(long, global = true, env = "ADL_LAB_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exchange, liquidation, fund and ADL loop over a scenario.
    Simulate(ScenarioArgs),
    /// Compare two or more ADL policies on one wealth-space book.
    PolicyCompare(ScenarioArgs),
    /// Seed-parallel scaling and regret experiments.
    Sweep(ScenarioArgs),
    /// Replay recorded ADL fills against account snapshots.
    Replay(ReplayArgs),
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reject unknown keys in the scenario.
    #[arg(long)]
    strict: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum NumeraireArg {
    Pnl,
    Equity,
}

#[derive(clap::Args)]
struct ReplayArgs {
    /// Fill records CSV.
    #[arg(long)]
    fills: PathBuf,
    /// Account snapshot CSV.
    #[arg(long)]
    snapshots: PathBuf,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// A gap longer than this starts a new wave.
    #[arg(long, default_value_t = 5_000)]
    gap_ms: i64,
    /// Post-wave horizons in milliseconds for the overshoot table.
    #[arg(long, value_delimiter = ',', default_value = "0,500,1000,2000,5000")]
    horizons: Vec<i64>,
    /// Benchmark policies; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    /// Endowment used for haircuts; equity is a diagnostic only.
    #[arg(long, value_enum, default_value = "pnl")]
    numeraire: NumeraireArg,
    /// Fail on unknown columns, unrecoverable marks or missing snapshots.
    #[arg(long)]
    strict: bool,
    /// Contract size in coin units for the integer benchmarks.
    #[arg(long, default_value_t = 1.0)]
    contract_size: f64,
    /// Exit sensitivity of the churn revenue proxy.
    #[arg(long, default_value_t = 1.0)]
    churn_beta: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible { .. } => 3,
            Error::DataQuality(_) => 4,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, cli.seed),
        Command::PolicyCompare(a) => policy_compare(a, cli.seed),
        Command::Sweep(a) => sweep(a, cli.seed),
        Command::Replay(a) => replay_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_scenario(args: &ScenarioArgs, seed: Option<u64>) -> CliResult<ScenarioConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| input_error(format!("{}: {e}", args.config.display())))?;
    let (mut cfg, unknown) = ScenarioConfig::from_json(&text, args.strict)?;
    for key in unknown {
        eprintln!("warning: ignoring unknown key '{key}'");
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&args.out).map_err(|e| input_error(format!("{}: {e}", args.out.display())))?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| input_error(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(name), text).map_err(|e| input_error(format!("{name}: {e}")))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> CliResult<()> {
    let io = |e: csv::Error| input_error(format!("{name}: {e}"));
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| input_error(format!("{name}: {e}")))
}

fn create(dir: &Path, name: &str) -> CliResult<fs::File> {
    fs::File::create(dir.join(name)).map_err(|e| input_error(format!("{name}: {e}")))
}

#[derive(Serialize)]
struct RateRow {
    t: usize,
    funding_rate: f64,
}

fn simulate(args: &ScenarioArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_scenario(args, seed)?;
    let out = scenario::run_simulation(&cfg)?;
    let rates: Vec<RateRow> =
        out.funding_rates.iter().enumerate().map(|(t, r)| RateRow { t, funding_rate: *r }).collect();
    write_csv(&args.out, "funding_rates.csv", &rates)?;
    write_csv(&args.out, "trajectory.csv", &out.trajectory)?;
    write_csv(&args.out, "liquidations.csv", &out.liquidations)?;
    write_csv(&args.out, "fund.csv", &out.fund)?;
    write_csv(&args.out, "leverage_masses.csv", &out.leverage_masses)?;
    write_json(&args.out, "allocations.json", &out.allocations)?;
    println!(
        "simulated {} steps, {} liquidations, {} ADL rounds -> {}",
        out.funding_rates.len(),
        out.liquidations.len(),
        out.allocations.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DominanceRow<'a> {
    left: &'a str,
    right: &'a str,
    submajorized: bool,
}

fn policy_compare(args: &ScenarioArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_scenario(args, seed)?;
    let cmp = scenario::compare_policies(&cfg)?;
    write_json(&args.out, "comparison.json", &cmp)?;
    write_csv(&args.out, "compare.csv", &cmp.rows)?;
    let dom: Vec<DominanceRow> = cmp
        .dominance
        .iter()
        .map(|d| DominanceRow { left: &d.left, right: &d.right, submajorized: d.submajorized })
        .collect();
    write_csv(&args.out, "dominance.csv", &dom)?;
    for r in &cmp.rows {
        println!(
            "{:<20} budget {:>12.6} top survivor {:>12.6} gap {:>12.6}",
            r.policy,
            r.budget,
            r.top_survivor.unwrap_or(f64::NAN),
            r.survivor_gap.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ScalingSummary {
    slope_vs_n: f64,
    slope_vs_scale: f64,
}

fn sweep(args: &ScenarioArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = load_scenario(args, seed)?;
    let spec = cfg.sweep.as_ref().ok_or_else(|| input_error("scenario has no sweep section"))?;
    if spec.scaling.is_none() && spec.regret.is_none() {
        return Err(input_error("sweep section names no experiment"));
    }
    if let Some(scaling) = &spec.scaling {
        let mut scaling = scaling.clone();
        if let Some(s) = seed {
            scaling.base_seed = s;
        }
        let table = metrics::ptsr_scaling_experiment(&scaling)?;
        write_csv(&args.out, "scaling_runs.csv", &table.runs)?;
        write_csv(&args.out, "scaling_rows.csv", &table.rows)?;
        write_json(
            &args.out,
            "scaling_summary.json",
            &ScalingSummary { slope_vs_n: table.slope_vs_n, slope_vs_scale: table.slope_vs_scale },
        )?;
        println!("scaling: slope of mean PTSR vs n = {:.4}", table.slope_vs_n);
    }
    if let Some(regret) = &spec.regret {
        let rows = scenario::run_regret_sweep(regret, cfg.seed)?;
        write_csv(&args.out, "regret.csv", &rows)?;
        println!("regret: {} controllers scored", rows.len());
    }
    Ok(())
}

fn replay_cmd(args: &ReplayArgs) -> CliResult<()> {
    let open = |p: &PathBuf| fs::File::open(p).map_err(|e| input_error(format!("{}: {e}", p.display())));
    let (fills, fdq) = replay::read_fills(open(&args.fills)?, args.strict)?;
    let (snaps, sdq) = replay::read_snapshots(open(&args.snapshots)?, args.strict)?;
    let policies = if args.policies.is_empty() {
        BenchmarkPolicy::ALL.to_vec()
    } else {
        args.policies.iter().map(|p| BenchmarkPolicy::parse(p)).collect::<Result<Vec<_>, _>>()?
    };
    let cfg = ReplayConfig {
        gap_ms: args.gap_ms,
        horizons_ms: args.horizons.clone(),
        policies,
        numeraire: match args.numeraire {
            NumeraireArg::Pnl => Numeraire::PnlOnly,
            NumeraireArg::Equity => Numeraire::Equity,
        },
        strict: args.strict,
        contract_size: args.contract_size,
        churn_beta: args.churn_beta,
    };
    let mut report = replay::event_report(&fills, &snaps, &cfg)?;
    let dq = &mut report.aggregate.data_quality;
    dq.unknown_columns += fdq.unknown_columns + sdq.unknown_columns;

    fs::create_dir_all(&args.out).map_err(|e| input_error(format!("{}: {e}", args.out.display())))?;
    replay::write_wave_csv(create(&args.out, "wave_reports.csv")?, &report)?;
    write_json(&args.out, "aggregate.json", &report.aggregate)?;
    let names: Vec<&str> =
        std::iter::once("production").chain(cfg.policies.iter().map(|p| p.name())).collect();
    for name in names {
        replay::write_allocation_csv(create(&args.out, &format!("allocations_{name}.csv"))?, &report, name)?;
    }
    println!(
        "replayed {} waves ({}): deficit {:.6}, needed {:.6}",
        report.aggregate.waves, report.aggregate.label, report.aggregate.total_deficit, report.aggregate.total_b_needed
    );
    Ok(())
}
