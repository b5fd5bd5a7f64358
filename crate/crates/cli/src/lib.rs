//! `ndkf` command line: train networks, run experiments, sweep Monte Carlo
//! seeds and run the self-checks.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ndkf::selfcheck::run_self_checks;
use ndkf::sim::{
    monte_carlo, run_experiment, summary_rows, write_run_csvs, write_summary, ExperimentConfig, McSummary, ModelSet,
    TrainedModels, Variant,
};

#[derive(Debug, Parser)]
#[command(name = "ndkf", version, about = "Neural-enhanced distributed Kalman filter experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    /// Fit the dynamics and measurement networks and save them under <out-dir>/models
    Train,
    /// Run one experiment and write its CSV files
    Run,
    /// Run a Monte Carlo sweep and write summary.csv
    Montecarlo,
    /// Run both variants over the Monte Carlo seeds and print an RMSE table
    Compare,
    /// Run the built-in invariant checks
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Ndkf,
    Ekf,
    Both,
}

impl VariantArg {
    fn variants(self) -> Vec<Variant> {
        match self {
            VariantArg::Ndkf => vec![Variant::Ndkf],
            VariantArg::Ekf => vec![Variant::Ekf],
            VariantArg::Both => vec![Variant::Ndkf, Variant::Ekf],
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Options {
    /// Experiment config (TOML); built-in defaults when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for models and CSV output
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Overrides the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the number of Monte Carlo runs
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::Both)]
    pub variant: VariantArg,
}

/// Parses `args` (including the program name) and executes the verb.
/// Returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(opts: &Options) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = opts.runs {
        cfg.mc_runs = runs as usize;
    }
    cfg.validate()?;
    Ok(cfg)
}

const KEY_FILE: &str = "trained_with.toml";

fn train_and_save(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainedModels> {
    let (models, reports) = TrainedModels::train(cfg)?;
    for r in &reports {
        println!(
            "trained {:<20} {:>4} samples  mse {:.6} -> {:.6}",
            r.name, r.samples, r.report.initial_loss, r.report.final_loss
        );
    }
    models.save(dir).with_context(|| format!("saving networks to {}", dir.display()))?;
    fs::write(dir.join(KEY_FILE), TrainedModels::training_key(cfg))?;
    println!("saved networks to {}", dir.display());
    Ok(models)
}

/// Loads the saved networks when they were trained with an equivalent config,
/// otherwise trains and saves fresh ones.
fn obtain_models(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainedModels> {
    let dir = out_dir.join("models");
    let key = TrainedModels::training_key(cfg);
    let saved_key = fs::read_to_string(dir.join(KEY_FILE)).ok();
    if saved_key.as_deref() == Some(key.as_str()) && TrainedModels::exists(&dir, cfg.n_nodes) {
        println!("loading networks from {}", dir.display());
        return TrainedModels::load(&dir, cfg.n_nodes)
            .with_context(|| format!("loading networks from {}", dir.display()));
    }
    train_and_save(cfg, &dir)
}

fn model_sets(cfg: &ExperimentConfig, variants: &[Variant], out_dir: &Path) -> Result<Vec<(Variant, ModelSet)>> {
    let trained = if variants.contains(&Variant::Ndkf) {
        Some(obtain_models(cfg, out_dir)?)
    } else {
        None
    };
    variants
        .iter()
        .map(|&v| {
            let set = match v {
                Variant::Ndkf => ModelSet::learned(trained.as_ref().expect("trained above"), cfg.jacobian)?,
                Variant::Ekf => ModelSet::ekf_baseline(cfg),
            };
            Ok((v, set))
        })
        .collect()
}

fn sweep(cfg: &ExperimentConfig, variants: &[Variant], out_dir: &Path) -> Result<McSummary> {
    let sets = model_sets(cfg, variants, out_dir)?;
    let refs: Vec<(Variant, &ModelSet)> = sets.iter().map(|(v, s)| (*v, s)).collect();
    let summary = monte_carlo(cfg, cfg.mc_runs, &refs)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("summary.csv");
    write_summary(&summary_rows(&summary), BufWriter::new(File::create(&path)?))?;
    println!("wrote {}", path.display());
    Ok(summary)
}

fn print_table(summary: &McSummary) {
    println!();
    println!("{:<22}{:>12}{:>12}", "Method", "RMSE px", "RMSE py");
    for v in &summary.variants {
        let label = match v.variant {
            Variant::Ndkf => "NDKF (proposed)",
            Variant::Ekf => "Distributed EKF",
        };
        println!("{label:<22}{:>12.4}{:>12.4}", v.mean_rmse_px, v.mean_rmse_py);
    }
    if let Some(v) = summary.variants.first() {
        println!("({} Monte Carlo runs, {} messages per run)", v.runs, v.msg_count);
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let opts = &cli.opts;
    if cli.verb == Verb::Check {
        let mut failed = 0;
        for c in run_self_checks() {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            failed += usize::from(!c.passed);
        }
        return Ok(i32::from(failed > 0));
    }

    let cfg = load_config(opts)?;
    let out = &opts.out_dir;
    match cli.verb {
        Verb::Train => {
            train_and_save(&cfg, &out.join("models"))?;
        }
        Verb::Run => {
            let variants = opts.variant.variants();
            let sets = model_sets(&cfg, &variants, out)?;
            for (variant, set) in &sets {
                let res = run_experiment(&cfg, *variant, set, 0)?;
                let dir = if sets.len() > 1 { out.join(variant.name()) } else { out.clone() };
                write_run_csvs(&res, &dir).with_context(|| format!("writing CSVs to {}", dir.display()))?;
                let m = &res.metrics;
                println!(
                    "{variant}: rmse_px {:.4} rmse_py {:.4}  messages {}  inversions {}  network passes {}  -> {}",
                    m.rmse_px,
                    m.rmse_py,
                    m.msg_count,
                    m.matrix_inversions,
                    m.nn_forward_passes,
                    dir.display()
                );
            }
        }
        Verb::Montecarlo => {
            let summary = sweep(&cfg, &opts.variant.variants(), out)?;
            print_table(&summary);
        }
        Verb::Compare => {
            let summary = sweep(&cfg, &[Variant::Ndkf, Variant::Ekf], out)?;
            print_table(&summary);
        }
        Verb::Check => unreachable!(),
    }
    Ok(0)
}
