//! `cbm`: run experiments from JSON configs, generate data, or serve a model.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cbm_bench::config::{parse_seed_list, ExperimentConfig};
use cbm_bench::experiments::{
    run_data_efficiency, run_gen_data, run_intervention, run_probe, run_roster, run_shift, run_theory, Report,
    RosterRow,
};
use cbm_bench::report::write_result;
use cbm_bench::{Result, EXIT_CONFIG, EXIT_DIVERGED};
use cbm_core::data::{load_csv, load_manifest, Split};
use cbm_core::intervention::compute_logit_percentiles;
use cbm_core::models::{Connection, Model};

#[derive(Parser)]
#[command(name = "cbm", version, about = "Concept bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds overriding the config, e.g. `0,1,5-9`.
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write each seed's generated splits as CSV plus a manifest.
    GenData(RunArgs),
    /// Train every roster entry and report test errors (mean ± 2SD).
    Roster {
        #[command(flatten)]
        run: RunArgs,
        /// Also save each trained model under `<out>/models/`.
        #[arg(long)]
        save_models: bool,
    },
    /// Error versus fraction of training data.
    DataEff(RunArgs),
    /// Ordinary versus shifted test error.
    Shift(RunArgs),
    /// Test-time intervention curves.
    Intervene(RunArgs),
    /// Linear probes on every layer.
    Probe(RunArgs),
    /// Closed-form versus Monte Carlo risk sweep.
    Theory(RunArgs),
    /// Serve a model and dataset over HTTP.
    Serve {
        /// Model checkpoint (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Dataset CSV to browse and intervene on.
        #[arg(long)]
        data: PathBuf,
        /// Manifest; defaults to `manifest.json` next to the data.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Training CSV for logit percentiles; defaults to the served data.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(list) = &args.seed {
        cfg.seeds = parse_seed_list(list)?;
    }
    Ok(cfg)
}

/// Writes the report and turns recorded failures into an exit status.
fn finish<T: Serialize>(out: &Path, name: &str, report: &Report<T>) -> Result<ExitCode> {
    let path = write_result(out, name, report)?;
    println!("wrote {}", path.display());
    for f in &report.failures {
        eprintln!("{} seed {}: {}", f.entry, f.seed, f.error);
    }
    Ok(if report.diverged() {
        ExitCode::from(EXIT_DIVERGED as u8)
    } else if !report.failures.is_empty() {
        ExitCode::from(EXIT_CONFIG as u8)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_rows(rows: &[RosterRow]) {
    for r in rows {
        let fmt = |s: &Option<cbm_bench::report::Stat>| {
            s.as_ref().map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, 2.0 * s.sd))
        };
        println!("{:<24} task {:<20} concepts {}", r.name, fmt(&r.task_error), fmt(&r.concept_error));
    }
}

fn serve(
    model: &Path,
    data: &Path,
    manifest: Option<&Path>,
    train: Option<&Path>,
    addr: SocketAddr,
) -> Result<ExitCode> {
    let model = Model::load(model)?;
    let manifest_path = manifest.map_or_else(
        || data.parent().unwrap_or(Path::new(".")).join("manifest.json"),
        Path::to_path_buf,
    );
    let manifest = load_manifest(&manifest_path)?;
    let dataset = load_csv(data, &manifest, Split::Test)?;
    let logits = model.as_bottleneck().is_ok_and(|m| m.connection == Connection::Logits);
    let percentiles = if logits {
        let source = match train {
            Some(p) => load_csv(p, &manifest, Split::Train)?,
            None => dataset.clone(),
        };
        Some(compute_logit_percentiles(&model, &source, 0.05, 0.95)?)
    } else {
        None
    };
    let state = cbm_service::AppState::new(model, dataset, percentiles)?;
    let runtime = tokio::runtime::Runtime::new()?;
    println!("listening on {addr}");
    runtime.block_on(cbm_service::serve(state, addr))?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = load_config(&a)?;
            finish(&a.out, "gen_data", &run_gen_data(&cfg, &a.out)?)
        }
        Command::Roster { run, save_models } => {
            let cfg = load_config(&run)?;
            let models = save_models.then(|| run.out.join("models"));
            let report = run_roster(&cfg, models.as_deref())?;
            print_rows(&report.results);
            finish(&run.out, "roster", &report)
        }
        Command::DataEff(a) => {
            let cfg = load_config(&a)?;
            let report = run_data_efficiency(&cfg)?;
            for c in &report.results {
                for p in &c.points {
                    print!("{:>6} ", p.fraction);
                    print_rows(std::slice::from_ref(&p.row));
                }
            }
            finish(&a.out, "data_efficiency", &report)
        }
        Command::Shift(a) => {
            let cfg = load_config(&a)?;
            let report = run_shift(&cfg)?;
            for r in &report.results {
                print_rows(std::slice::from_ref(&r.unshifted));
                print_rows(&[RosterRow { name: format!("{} (shifted)", r.name), ..r.shifted.clone() }]);
            }
            finish(&a.out, "shift", &report)
        }
        Command::Intervene(a) => finish(&a.out, "intervention", &run_intervention(&load_config(&a)?)?),
        Command::Probe(a) => finish(&a.out, "probe", &run_probe(&load_config(&a)?)?),
        Command::Theory(a) => {
            let cfg = load_config(&a)?;
            std::fs::create_dir_all(&a.out)?;
            let report = run_theory(&cfg, Some(&a.out.join("theory.csv")))?;
            if !report.results.exact_le_bound {
                eprintln!("warning: a ratio limit exceeded its bound");
            }
            finish(&a.out, "theory", &report)
        }
        Command::Serve {
            model,
            data,
            manifest,
            train,
            addr,
        } => serve(&model, &data, manifest.as_deref(), train.as_deref(), addr),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
