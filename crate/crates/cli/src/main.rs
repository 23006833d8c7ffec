//! Command-line front end: data generation, training, evaluation, ablation,
//! map export and a self check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use anomseg::harness::ablation::{ablate, datasets};
use anomseg::harness::checkpoint;
use anomseg::harness::data::export_dataset;
use anomseg::harness::eval::{evaluate, export_maps};
use anomseg::harness::selftest;
use anomseg::harness::train::{train, write_trace};
use anomseg::{Exec, RunConfig};

#[derive(Parser)]
#[command(name = "anomseg", version, about = "Anomaly segmentation with Conv-LoRA adapters and a dynamic fusion gateway")]
struct Cli {
    /// Run on one thread even when built with the `parallel` feature.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Trailing `--key value` overrides applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test splits as an MVTec-style tree.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one configuration; writes checkpoint.bin and trace.csv.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split of its configuration.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Evaluate on this dataset directory instead.
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
    },
    /// Run baseline, +conv_lora, +dfg and full over the configured seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write 16-bit anomaly maps and an image-score index for the test split.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
    },
    /// Kernel, metric and gradient checks.
    Selftest,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_config(path: &Path, dataset_dir: &Option<PathBuf>) -> Result<(RunConfig, checkpoint::Checkpoint)> {
    let ckpt = checkpoint::load(path)?;
    let mut config = ckpt.config.clone();
    if let Some(dir) = dataset_dir {
        config.data.dataset_dir = Some(dir.clone());
    }
    Ok((config, ckpt))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Gen { out, cfg } => {
            let config = cfg.load()?;
            if config.data.dataset_dir.is_some() {
                bail!("gen writes synthetic data; unset dataset_dir");
            }
            let (tr, te) = datasets(&config)?;
            export_dataset(&out, "train", &tr)?;
            export_dataset(&out, "test", &te)?;
            println!("wrote {} train and {} test images to {}", tr.len(), te.len(), out.display());
        }
        Command::Train { out, cfg } => {
            let config = cfg.load()?;
            create_dir(&out)?;
            let (tr, te) = datasets(&config)?;
            let steps = config.optim.steps;
            let outcome = train(&config, &tr, exec, |r| {
                if r.step % 50 == 0 || r.step + 1 == steps {
                    eprintln!(
                        "step {:>5} total {:.5} seg {:.5} cls {:.5}",
                        r.step, r.terms.total, r.terms.seg, r.terms.cls
                    );
                }
            })?;
            let report = evaluate(&outcome.model, &te, exec, &config.to_text())?;
            checkpoint::save(&out.join("checkpoint.bin"), &config, steps, &outcome.model.store)?;
            write_trace(&out.join("trace.csv"), &outcome.trace, Some(&report.summary()))?;
            write(&out.join("config.txt"), &config.to_text())?;
            print!("{}", report.summary());
        }
        Command::Eval {
            checkpoint,
            report,
            dataset_dir,
        } => {
            let (config, ckpt) = checkpoint_config(&checkpoint, &dataset_dir)?;
            let (_, te) = datasets(&config)?;
            let r = evaluate(&ckpt.model, &te, exec, &config.to_text())?;
            if let Some(path) = report {
                write(&path, &r.to_text())?;
            }
            print!("{}", r.summary());
        }
        Command::Ablate { out, cfg } => {
            let config = cfg.load()?;
            create_dir(&out)?;
            let result = ablate(&config, exec, |seed, v, m| {
                eprintln!("seed {seed} {:<10} {}", v.label(), m.csv_values());
            })?;
            write(&out.join("ablation.csv"), &result.to_csv())?;
            write(&out.join("seeds.csv"), &result.seeds_csv())?;
            write(&out.join("census.csv"), &result.census_csv())?;
            print!("{}", result.to_csv());
            if config.ablation_seeds > 0 {
                for c in result.directional()? {
                    println!(
                        "{} {} > {}: means {:.4} vs {:.4}, {}/{} wins, sign test p = {:.4}",
                        c.metric,
                        c.better.label(),
                        c.worse.label(),
                        c.mean_better,
                        c.mean_worse,
                        c.wins,
                        c.trials,
                        c.p_value
                    );
                }
            }
        }
        Command::ExportMaps {
            checkpoint,
            out,
            dataset_dir,
        } => {
            let (config, ckpt) = checkpoint_config(&checkpoint, &dataset_dir)?;
            let (_, te) = datasets(&config)?;
            export_maps(&ckpt.model, &te, &out, exec)?;
            println!("wrote {} maps to {}", te.len(), out.display());
        }
        Command::Selftest => {
            let checks = selftest::run()?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                bail!("self test failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
