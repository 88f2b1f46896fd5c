//! `opehf` command-line harness.
//!
//! Exit codes: 0 on full success, 2 when some pipeline cells failed, 1 on
//! configuration or other fatal errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opehf::io::load_dataset;
use opehf::pipeline::{self, ExperimentConfig};
use opehf::vlmh::VlmhModel;
use opehf::Error;

#[derive(Parser)]
#[command(name = "opehf", version, about = "Off-policy evaluation of human returns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list.
    #[arg(long, num_args = 1..)]
    seed: Vec<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> opehf::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets and the manifest of exact target values.
    GenData(ConfigArgs),
    /// Run the full pipeline and write the report.
    Run(ConfigArgs),
    /// Export posterior-mean latent encodings of a dataset as CSV.
    ExportEncodings {
        /// Trained latent model written by `run`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PDIS-versus-IS variance study on a near-behavior target.
    VarianceStudy(ConfigArgs),
    /// Rebuild the report from the estimates of an earlier run.
    Report {
        /// Output directory of the run.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Partial(usize),
    Fatal(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

fn print_summaries(report: &pipeline::Report) {
    for s in &report.summaries {
        println!(
            "{:<14} {:<11} mae {:.4} ± {:.4}  rank {:+.3} ± {:.3}  regret@1 {:.4}",
            s.estimator, s.method, s.mae_mean, s.mae_se, s.rank_mean, s.rank_se, s.regret_mean
        );
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData(a) => {
            let cfg = a.load()?;
            let m = pipeline::gen_data(&cfg)?;
            println!("wrote {} datasets to {}", m.seeds.len(), cfg.out_dir.display());
        }
        Command::Run(a) => {
            let cfg = a.load()?;
            let out = pipeline::run(&cfg)?;
            print_summaries(&out.report);
            if out.failures() > 0 {
                return Err(Failure::Partial(out.failures()));
            }
        }
        Command::ExportEncodings { model, dataset, out } => {
            let m = VlmhModel::load(model)?;
            let ds = load_dataset(dataset)?;
            let rows = pipeline::export_encodings(&m, &ds, &out)?;
            println!("wrote {rows} encodings to {}", out.display());
        }
        Command::VarianceStudy(a) => {
            let cfg = a.load()?;
            for r in pipeline::run_variance_study(&cfg)? {
                let s = &r.study;
                println!(
                    "seed {}: tv {:.3}  var(pdis) {:.5}  var(is) {:.5}  audit min corr {:.4}",
                    r.seed, r.max_tv, s.var_pdis, s.var_is, s.audit.min_correlation
                );
            }
        }
        Command::Report { out } => {
            let rep = pipeline::report(&out)?;
            print_summaries(&rep.report);
            if rep.failures() > 0 {
                return Err(Failure::Partial(rep.failures()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("{n} pipeline cells failed; see errors.jsonl");
            ExitCode::from(2)
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
