use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use traversal_core::scenarios::{
    catalog, catalog_config, emit, run_scenario, validate, OutputFormat, PipelineConfig, ResultBundle, ScenarioConfig,
};
use traversal_core::{Error, Result};

/// Weak-measurement traversal-time lab.
#[derive(Debug, Parser)]
#[command(name = "traversal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration without running it.
    Validate(Source),
    /// Run every configured pipeline and write the results.
    Run(RunArgs),
    /// Run only the clock sweeps.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated clock strengths, largest first.
        #[arg(long, value_delimiter = ',')]
        strengths: Option<Vec<f64>>,
    },
    /// Run and print the cross-method checks; fails if any check fails.
    Compare(RunArgs),
    /// Re-emit a saved JSON bundle.
    Emit {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Args)]
struct Source {
    /// Scenario file (TOML, dotted keys).
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Built-in scenario name, or "all".
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Debug, Args)]
struct Output {
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    fn formats(self) -> Vec<OutputFormat> {
        match self {
            Format::Csv => vec![OutputFormat::Csv],
            Format::Json => vec![OutputFormat::Json],
            Format::Both => vec![OutputFormat::Csv, OutputFormat::Json],
        }
    }
}

fn configs(source: &Source) -> Result<Vec<ScenarioConfig>> {
    match (&source.config, source.scenario.as_deref()) {
        (Some(path), _) => Ok(vec![ScenarioConfig::load(path)?]),
        (None, Some("all")) => catalog(),
        (None, Some(name)) => Ok(vec![catalog_config(name)?]),
        (None, None) => Err(Error::Config("pass --config <file> or --scenario <name>".into())),
    }
}

fn write(bundle: &ResultBundle, output: &Output) -> Result<()> {
    for f in output.format.formats() {
        let path = emit(bundle, f, &output.out_dir)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_all(cfgs: &[ScenarioConfig]) -> Result<Vec<ResultBundle>> {
    cfgs.par_iter().map(run_scenario).collect()
}

fn print_checks(bundle: &ResultBundle) {
    println!("{}", bundle.scenario);
    for c in &bundle.checks {
        let status = if c.passed { "pass" } else { "FAIL" };
        println!(
            "  {status} {:<40} {:<28} l={} discrepancy={:.3e} tolerance={:.3e}",
            c.name, c.postselection, c.l, c.discrepancy, c.tolerance
        );
    }
}

fn load_bundle(path: &Path) -> Result<ResultBundle> {
    ResultBundle::from_json(&std::fs::read_to_string(path)?)
}

fn execute(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Validate(source) => {
            for cfg in configs(&source)? {
                let (_, v) = validate(&cfg)?;
                println!("ok {} {}", cfg.name, cfg.hash());
                for w in v.warnings {
                    println!("  warning: {w}");
                }
            }
            Ok(0)
        }
        Command::Run(args) => {
            for b in run_all(&configs(&args.source)?)? {
                write(&b, &args.output)?;
            }
            Ok(0)
        }
        Command::Sweep { run, strengths } => {
            let mut cfgs = configs(&run.source)?;
            for cfg in &mut cfgs {
                cfg.pipelines = PipelineConfig { sojourn: false, clocks: true, meter: false, moments: false };
                if strengths.is_some() {
                    cfg.clocks.strengths = strengths.clone();
                }
            }
            for b in run_all(&cfgs)? {
                write(&b, &run.output)?;
            }
            Ok(0)
        }
        Command::Compare(args) => {
            let mut failed = 0;
            for b in run_all(&configs(&args.source)?)? {
                print_checks(&b);
                failed += b.failed_checks().len();
                write(&b, &args.output)?;
            }
            println!("{failed} failed checks");
            Ok(if failed > 0 { 2 } else { 0 })
        }
        Command::Emit { bundle, output } => {
            write(&load_bundle(&bundle)?, &output)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
