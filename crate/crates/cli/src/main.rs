use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use normopt::harness::{
    self, factorial_grid, BootstrapConfig, FactorialSpec, HarnessError, RunConfig, SweepKind, TrainOptions,
};
use normopt::norm::NormKind;
use normopt::optim::OptimizerKind;
use normopt::report;
use normopt::tpcost::{self, TpScenario};
use serde_json::json;

#[derive(Parser)]
#[command(name = "normopt", version, about = "Normalizer x optimizer training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `norm.lambda=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Byte corpus; the built-in synthetic corpus when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, env = "NORMOPT_OUTDIR", default_value = "runs")]
    outdir: PathBuf,
    /// Wipe an occupied output location first.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    /// Continue in an occupied output location, reusing finished runs and
    /// checkpoints.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(c) = &self.corpus {
            overrides.push(format!("data.corpus={:?}", c.display().to_string()));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the normalizer x optimizer grid and report gaps and interactions.
    Factorial {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "rmsnorm,derf,dyt")]
        norms: Vec<NormKind>,
        #[arg(long, value_delimiter = ',', default_value = "adamw,muon")]
        optims: Vec<OptimizerKind>,
        #[arg(long, value_delimiter = ',', default_value = "42,43,44")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "rmsnorm")]
        reference: NormKind,
        /// Bootstrap resamples for contrast intervals; 0 disables.
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Print the scheduled runs without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// One-dimensional sweep (lambda, alpha or Muon learning rate).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        kind: SweepKind,
        /// Values to sweep; the kind's standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "42")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        dry_run: bool,
    },
    /// Analytic tensor-parallel allreduce accounting.
    Tpcost {
        #[arg(long, default_value_t = 33)]
        sites: u64,
        #[arg(long, default_value_t = 64)]
        microbatches: u64,
        #[arg(long, default_value_t = 8)]
        tp: u64,
        #[arg(long, default_value_t = 8 * 2048)]
        tokens_per_microbatch: u64,
        #[arg(long, default_value_t = 5.0)]
        latency_us: f64,
        #[arg(long, default_value_t = 200.0)]
        bandwidth_gbps: f64,
        #[arg(long, value_delimiter = ',', default_value = "rmsnorm,derf_ema,dyt,derf")]
        methods: Vec<NormKind>,
        #[arg(long, default_value = "rmsnorm")]
        baseline: NormKind,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Also write `tpcost.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate run outputs against their schemas and write the report index.
    ReportData {
        /// Run directories; every `run_*` under `--root` when omitted.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, env = "NORMOPT_OUTDIR", default_value = "runs")]
        root: PathBuf,
        /// Where `report_data.json` goes; defaults to the root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
    details: serde_json::Value,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            details: serde_json::Value::Null,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("output serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn is_occupied(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Applies the --force / --resume policy to an output location.
fn prepare(path: &Path, run: &RunArgs) -> Result<(), CliError> {
    if is_occupied(path) {
        if run.force {
            log::warn!("--force: clearing {}", path.display());
            fs::remove_dir_all(path).map_err(io_err(path))?;
        } else if !run.resume {
            return Err(CliError::new(
                "occupied",
                format!("{} is not empty; pass --force to overwrite or --resume to continue", path.display()),
            ));
        }
    }
    fs::create_dir_all(path).map_err(io_err(path))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.load()?;
            let dir = run.outdir.join(cfg.run_id());
            prepare(&dir, &run)?;
            let outcome = harness::train(
                &cfg,
                &dir,
                TrainOptions {
                    resume: run.resume,
                    stop_after: None,
                },
            )?;
            print_json(&outcome.summary);
        }
        Command::Factorial {
            run,
            norms,
            optims,
            seeds,
            reference,
            bootstrap,
            jobs,
            dry_run,
        } => {
            let spec = FactorialSpec {
                norms,
                optimizers: optims,
                seeds,
                reference,
                base: run.load()?,
            };
            if dry_run {
                let plan: Vec<_> = factorial_grid(&spec)
                    .iter()
                    .map(|c| json!({"label": c.label, "optimizer": c.config.optim.kind, "seed": c.config.seed, "run_id": c.config.run_id()}))
                    .collect();
                print_json(&plan);
                return Ok(());
            }
            prepare(&run.outdir, &run)?;
            let boot = (bootstrap > 0).then(|| BootstrapConfig {
                resamples: bootstrap,
                ..BootstrapConfig::default()
            });
            let (records, report) = harness::factorial(&spec, &run.outdir, jobs, boot);
            write_json(&run.outdir.join("factorial_runs.json"), &records)?;
            write_json(&run.outdir.join("factorial_report.json"), &report)?;
            print_json(&report);
        }
        Command::Sweep {
            run,
            kind,
            values,
            seeds,
            jobs,
            dry_run,
        } => {
            let base = run.load()?;
            let values = if values.is_empty() {
                kind.default_values().to_vec()
            } else {
                values
            };
            if dry_run {
                let plan: Vec<_> = harness::sweep_grid(kind, &values, &seeds, &base)?
                    .iter()
                    .map(|c| json!({"label": c.label, "value": c.value, "reference": c.reference, "optimizer": c.config.optim.kind, "seed": c.config.seed, "run_id": c.config.run_id()}))
                    .collect();
                print_json(&plan);
                return Ok(());
            }
            prepare(&run.outdir, &run)?;
            let (records, report) = harness::sweep(kind, &values, &seeds, &base, &run.outdir, jobs)?;
            let name = format!("sweep_{}", kind.as_str());
            write_json(&run.outdir.join(format!("{name}_runs.json")), &records)?;
            write_json(&run.outdir.join(format!("{name}_report.json")), &report)?;
            print_json(&report);
        }
        Command::Tpcost {
            sites,
            microbatches,
            tp,
            tokens_per_microbatch,
            latency_us,
            bandwidth_gbps,
            methods,
            baseline,
            format,
            out,
        } => {
            let scenario = TpScenario {
                sites,
                micro_batches: microbatches,
                tp_degree: tp,
                tokens_per_microbatch,
                latency_us,
                bandwidth_gbps,
                ..TpScenario::default()
            };
            let table = tpcost::relative_cost(&methods, baseline, &scenario)
                .map_err(|e| CliError::new("tpcost", e.to_string()))?;
            match format {
                Format::Text => print!("{}", table.to_text()),
                Format::Csv => print!("{}", table.to_csv()),
                Format::Json => print_json(&table),
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let path = dir.join("tpcost.csv");
                fs::write(&path, table.to_csv()).map_err(io_err(&path))?;
            }
        }
        Command::ReportData { runs, root, out } => {
            let dirs = if runs.is_empty() {
                report::discover_runs(&root).map_err(io_err(&root))?
            } else {
                runs
            };
            if dirs.is_empty() {
                return Err(CliError::new("report", "no run directories found"));
            }
            let index = report::build_index(&dirs).map_err(|issues| CliError {
                kind: "schema",
                message: format!("{} schema issue(s)", issues.len()),
                details: serde_json::to_value(&issues).expect("issues serialize"),
            })?;
            let out = out.unwrap_or(root);
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_json(&out.join(report::INDEX_FILE), &index)?;
            println!("{}", json!({"runs": index.runs.len(), "index": out.join(report::INDEX_FILE)}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}});
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({"error": {"kind": e.kind, "message": e.message, "details": e.details}});
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
