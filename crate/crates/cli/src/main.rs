//! `ablate`: run instruction-ablation experiments against chat
//! endpoints and turn the results into interaction-topology tables.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ablate_core::analysis::{HubNull, PermutedUnit};
use ablate_core::report::{
    cmd_analyze, cmd_cost_report, cmd_coverage_check, cmd_run, cmd_verify, render_cost_report,
    render_verify_report, AnalyzeMode, AnalyzeOptions, ReportError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "ablate",
    version,
    about = "Instruction-block ablation harness: run, analyze, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run described by a JSON config file.
    Run(RunArgs),
    /// Derive tables and plot data from a results JSONL file.
    Analyze(Box<AnalyzeArgs>),
    /// Recompute tables, ledger totals, and cache entries; fail on any
    /// mismatch.
    Verify(VerifyArgs),
    /// Generate a covering array (or load a plan) and verify coverage.
    CoverageCheck(CoverageArgs),
    /// Per-model call counts and spend from a ledger file.
    CostReport(CostArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Use the scripted offline mock endpoint instead of the network.
    #[arg(long)]
    mock: bool,
    /// Keep existing results.jsonl lines and emit only missing cells.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// baseline | phase0 | phase1 | variant-compare
    #[arg(long, value_parser = parse_mode)]
    mode: AnalyzeMode,
    /// Results JSONL (variant A for variant-compare).
    #[arg(long)]
    results: PathBuf,
    /// Second results JSONL (variant B) for variant-compare.
    #[arg(long)]
    results_b: Option<PathBuf>,
    /// Plan file; reconstructed from the results when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Phase-0 results JSONL providing main effects for phase1 mode.
    #[arg(long)]
    phase0_results: Option<PathBuf>,
    /// Corpus manifest; repeatable. All supplied manifests feed the
    /// baseline character-statistics table; the first also supplies
    /// encoding labels for phase-0 variance tables.
    #[arg(long = "corpus")]
    corpora: Vec<PathBuf>,
    /// Probe battery (for encoding variance and variant targets).
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Benjamini-Hochberg FDR level.
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    /// Flat-topology band around zero.
    #[arg(long, default_value_t = 0.005)]
    epsilon: f64,
    /// Target block ids for variant-compare (comma separated).
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// Permutation unit: variant-within-cell | target-probe
    #[arg(long, default_value = "variant-within-cell")]
    permuted_unit: String,
    #[arg(long, default_value_t = 100_000)]
    n_perm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Block to test for hub concentration (phase1 mode).
    #[arg(long)]
    hub_block: Option<String>,
    #[arg(long, default_value_t = 20)]
    top_n: usize,
    /// Hub null model: slot-shuffle | degree-preserving
    #[arg(long, default_value = "slot-shuffle")]
    hub_null: String,
    /// Output directory for tables and summaries.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<AnalyzeMode, String> {
    s.parse()
}

#[derive(Args)]
struct VerifyArgs {
    /// Directory holding run and/or analysis artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Cache directory; enables per-result cache consistency checks.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct CoverageArgs {
    /// Number of binary factors to generate a covering array for.
    #[arg(long)]
    k: Option<usize>,
    /// Existing plan file to verify instead of generating one.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    strength: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CostArgs {
    /// Ledger JSON produced by a run.
    #[arg(long)]
    ledger: PathBuf,
}

fn parse_unit(s: &str) -> Result<PermutedUnit, ReportError> {
    match s {
        "variant-within-cell" => Ok(PermutedUnit::VariantWithinCell),
        "target-probe" => Ok(PermutedUnit::TargetProbe),
        other => Err(ReportError::Config(format!(
            "unknown permuted unit `{other}`"
        ))),
    }
}

fn parse_hub_null(s: &str) -> Result<HubNull, ReportError> {
    match s {
        "slot-shuffle" => Ok(HubNull::SlotShuffle),
        "degree-preserving" => Ok(HubNull::DegreePreserving),
        other => Err(ReportError::Config(format!("unknown hub null `{other}`"))),
    }
}

fn run(cli: Cli) -> Result<(), ReportError> {
    match cli.command {
        Command::Run(args) => {
            let mut config = RunConfig::load(&args.config)?;
            config.resolve_relative_to(&args.config);
            let summary = cmd_run(&config, args.mock, args.resume)?;
            println!(
                "run complete: {} cells ({} emitted, {} resumed), {} invalid, {} cache hits",
                summary.cells,
                summary.lines_emitted,
                summary.resumed_from,
                summary.invalid_trials,
                summary.cache_hits
            );
            println!(
                "calls: {} ({} network), cost: {}",
                summary.ledger.total_calls(),
                summary.ledger.total_network_calls(),
                summary.ledger.total_cost()
            );
            println!("results: {}", summary.results_path.display());
            Ok(())
        }
        Command::Analyze(args) => {
            let args = *args;
            let options = AnalyzeOptions {
                mode: args.mode,
                results: args.results,
                results_b: args.results_b,
                plan: args.plan,
                phase0_results: args.phase0_results,
                corpora: args.corpora,
                probes: args.probes,
                q: args.q,
                epsilon: args.epsilon,
                targets: args.targets,
                permuted_unit: parse_unit(&args.permuted_unit)?,
                n_perm: args.n_perm,
                seed: args.seed,
                hub_block: args.hub_block,
                top_n: args.top_n,
                hub_null: parse_hub_null(&args.hub_null)?,
                out_dir: args.out,
            };
            let summary = cmd_analyze(&options)?;
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
            Ok(())
        }
        Command::Verify(args) => {
            let report = cmd_verify(&args.out, args.cache.as_deref())?;
            print!("{}", render_verify_report(&report));
            if report.all_passed() {
                Ok(())
            } else {
                Err(ReportError::VerifyMismatch(
                    "one or more checks failed".into(),
                ))
            }
        }
        Command::CoverageCheck(args) => {
            let summary =
                cmd_coverage_check(args.k, args.plan.as_deref(), args.strength, args.seed)?;
            println!(
                "k={} strength={} rows={} tuples={} missing={}",
                summary.k, summary.strength, summary.rows, summary.total_tuples,
                summary.missing_tuples
            );
            if summary.covering {
                println!("PASS coverage");
                Ok(())
            } else {
                println!("FAIL coverage");
                Err(ReportError::VerifyMismatch(format!(
                    "{} missing tuples",
                    summary.missing_tuples
                )))
            }
        }
        Command::CostReport(args) => {
            let report = cmd_cost_report(&args.ledger)?;
            print!("{}", render_cost_report(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
