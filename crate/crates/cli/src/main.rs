use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csmn_core::checkpoint;
use csmn_core::config::RunConfig;
use csmn_core::harness::{self, Comparative, Dataset, Manifest, SweepParam};
use csmn_core::metrics::Comparison;
use csmn_core::model::Variant;

#[derive(Parser)]
#[command(name = "csmn", version, about = "Train and evaluate multi-scenario CTR models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with [data], [model] and [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// Overrides such as `model.dropout=0.2` or `epochs=3`; these win over the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory (overrides train.data_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test files and print per-scenario statistics.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (defaults to train.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model, logging loss and test AUC per epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for the log, checkpoint and manifest.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's test day.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding test.tsv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every variant on every seed and compare against the full model.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
        variants: Vec<Variant>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Sweep memory size (`q`) or the shared update rate (`update_rate`).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Tabulate finished runs found under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Show each run's improvement over this run family.
        #[arg(long, conflicts_with = "target")]
        baseline: Option<String>,
        /// Show this run family's improvement over each run.
        #[arg(long)]
        target: Option<String>,
        /// Also write report.csv and populations.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a manifest and check that every logged number comes back bit for bit.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Dataset directory, when it moved since the run.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let c = &args.config;
    let mut cfg = RunConfig::load(&c.config, &c.overrides)?;
    if let Some(d) = &args.data {
        cfg.train.data_dir = d.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::for_config(cfg).with_context(|| format!("loading dataset from {}", cfg.train.data_dir.display()))
}

fn print_line(line: &str) {
    println!("{line}");
}

fn print_comparative(c: &Comparative, out: &Path) {
    println!("\n{}", c.scenarios.text);
    println!("{}", c.populations.text);
    for m in c.scenarios.mismatches.iter().chain(&c.populations.mismatches) {
        println!("scenario mismatch: {m}");
    }
    println!("reports written to {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = RunConfig::load(&config.config, &config.overrides)?;
            let dir = out.unwrap_or_else(|| cfg.train.data_dir.clone());
            let g = harness::generate_dataset(&cfg.data, &dir)?;
            println!("train split\n{}", g.train_stats.render_text());
            println!("test split\n{}", g.test_stats.render_text());
            println!("train.tsv sha256 {}", g.hashes.train_sha256);
            println!("test.tsv sha256 {}", g.hashes.test_sha256);
            println!("dataset written to {}", dir.display());
        }
        Command::Train { run, variant, seed, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            let data = load_data(&cfg)?;
            harness::train(&cfg, &data, Some(&out), &mut print_line)?;
            println!("run written to {}", out.display());
        }
        Command::Eval { checkpoint: path, data } => {
            let model = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let ds = Dataset::load(&data, model.network().embeddings().schema().clone())?;
            let eval = harness::evaluate(&model, &ds)?;
            print!("{}", harness::render_evaluation(&eval));
        }
        Command::Ablate { run, seeds, variants, out } => {
            let cfg = load_config(&run)?;
            let data = load_data(&cfg)?;
            let c = harness::ablate(&cfg, &data, &variants, &seeds, Some(&out), &mut print_line)?;
            print_comparative(&c, &out);
        }
        Command::Sweep {
            run,
            param,
            values,
            seeds,
            variant,
            out,
        } => {
            let mut cfg = load_config(&run)?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            let data = load_data(&cfg)?;
            let s = harness::sweep(&cfg, &data, param, &values, &seeds, Some(&out), &mut print_line)?;
            print_comparative(&s.runs, &out);
            println!("{param} mean_auc");
            for (v, a) in &s.curve {
                println!("{v} {a:.6}");
            }
        }
        Command::Report {
            runs,
            baseline,
            target,
            out,
        } => {
            let comparison = match (baseline, target) {
                (Some(b), _) => Comparison::OverBaseline(b),
                (_, Some(t)) => Comparison::TargetOver(t),
                _ => Comparison::None,
            };
            let found = harness::collect_manifests(&runs)?;
            let c = harness::report_runs(found, &comparison)?;
            print!("{}", c.scenarios.text);
            println!();
            print!("{}", c.populations.text);
            for m in c.scenarios.mismatches.iter().chain(&c.populations.mismatches) {
                println!("scenario mismatch: {m}");
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.csv"), &c.scenarios.csv)?;
                fs::write(dir.join("populations.csv"), &c.populations.csv)?;
            }
        }
        Command::Replay { manifest, data } => {
            let m = Manifest::load(&manifest)?;
            let r = harness::replay(&m, data.as_deref(), &mut print_line)?;
            if !r.matches() {
                bail!("replay diverged from the manifest: {}", r.differences.join("; "));
            }
            println!("replay matches the manifest exactly");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
