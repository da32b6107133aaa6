use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qmf_core::data;
use qmf_core::exec::{with_workers, Parallelism};
use qmf_core::experiment::{self, DatasetSource, ExperimentConfig};
use qmf_core::io;
use qmf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "qmf", version, about = "Quality-aware multimodal fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config
    Generate(Common),
    /// Train every configured method for every seed
    Train {
        #[command(flatten)]
        common: Common,
        /// Save model checkpoints next to the reports
        #[arg(long)]
        checkpoints: bool,
    },
    /// Accuracy under each noise point, aggregated over seeds
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Load classifiers saved by `train --checkpoints` from this directory
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
    /// Generalization bound terms per seed (linear, two-class)
    Bound(Common),
    /// Weight/loss correlation for every uncertainty estimator
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Seeds: a count (`10`), a range (`3..7`) or a list (`0,4,9`)
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially
    #[arg(long)]
    jobs: Option<usize>,
    /// Let the fused loss backpropagate through the weights
    #[arg(long)]
    full_weight_grad: bool,
    /// Rescale each weight row to sum to 1
    #[arg(long)]
    normalize_weights: bool,
    /// Clamp weights at 0 before fusing
    #[arg(long)]
    clamp_weights: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf, Parallelism)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        cfg.train.full_weight_grad |= self.full_weight_grad;
        cfg.train.normalize_weights |= self.normalize_weights;
        cfg.train.clamp_weights |= self.clamp_weights;
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        let mode = if self.jobs == Some(1) {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel
        };
        let out = cfg.output_dir();
        Ok((cfg, out, mode))
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds {s:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else if s.contains(',') {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    } else {
        (0..s.trim().parse::<u64>().map_err(|_| bad())?).collect()
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn save_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    io::write_json(&out.join("config.json"), cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out, _) = c.load()?;
            let DatasetSource::Synthetic(spec) = &cfg.dataset else {
                return Err(Error::Config("generate needs a synthetic dataset spec".into()));
            };
            let ds = data::generate(spec)?;
            data::save(&ds, &out)?;
            println!("wrote {} samples x {} modalities to {}", ds.len(), ds.num_modalities(), out.display());
        }
        Command::Train { common, checkpoints } => {
            let (cfg, out, mode) = common.load()?;
            save_config(&cfg, &out)?;
            let runs = with_workers(common.jobs, || experiment::run_train(&cfg, &out, checkpoints, mode))?;
            for r in &runs {
                for (method, clf, _) in &r.trained {
                    println!("seed {} {method}: eval accuracy {:.4}", r.seed, clf.accuracy(&r.eval)?);
                }
            }
        }
        Command::Sweep { common, checkpoints } => {
            let (cfg, out, mode) = common.load()?;
            let table = with_workers(common.jobs, || experiment::run_sweep(&cfg, checkpoints.as_deref(), mode))?;
            table.write(&out)?;
            print!("{}", table.to_csv());
        }
        Command::Bound(c) => {
            let (cfg, out, mode) = c.load()?;
            let summary = with_workers(c.jobs, || experiment::run_bound(&cfg, mode))?;
            for (seed, r) in summary.seeds.iter().zip(&summary.reports) {
                io::write_json(&out.join(format!("bound_{seed}.json")), r)?;
                println!(
                    "seed {seed}: bound {:.4} gerror {:.4} {}",
                    r.total_bound,
                    r.measured_gerror,
                    if r.holds() { "holds" } else { "VIOLATED" }
                );
            }
            io::write_json(&out.join("bound.json"), &summary)?;
            println!("bound holds in {}/{} trials", summary.holds, summary.trials);
        }
        Command::Correlate { common, checkpoints } => {
            let (cfg, out, mode) = common.load()?;
            let table = with_workers(common.jobs, || {
                experiment::run_correlate(&cfg, checkpoints.as_deref(), Some(&out), mode)
            })?;
            io::write_text(&out.join("correlation.csv"), &table.to_csv())?;
            io::write_json(&out.join("correlation.json"), &table)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qmf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
