use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use srdp::bandit::{generate_dataset, BoxKind};
use srdp::checkpoint::Checkpoint;
use srdp::harness::config::{parse_grouping, ExperimentConfig};
use srdp::harness::report::{read_summary, table};
use srdp::harness::svg::emit_scatter_svg;
use srdp::harness::run_experiment;
use srdp::metrics::{grouped_chamfer, quadrant_accuracy, ActionSampler, GmmOracle};
use srdp::rng::{stream_rng, Stream};
use srdp::Result;

#[derive(Parser)]
#[command(name = "srdp", version, about = "Diffusion policies with state reconstruction on a contextual bandit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxArg {
    Train,
    Test,
}

/// Config file plus overrides, shared by every subcommand that needs one.
#[derive(Args)]
struct ConfigArgs {
    /// key = value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=1.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Comma separated.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut pairs: Vec<String> = Vec::new();
        if let Some(v) = &self.variant {
            pairs.push(format!("variant={v}"));
        }
        if let Some(v) = self.lambda {
            pairs.push(format!("lambda={v}"));
        }
        if let Some(v) = self.iterations {
            pairs.push(format!("iterations={v}"));
        }
        if let Some(v) = self.eval_interval {
            pairs.push(format!("eval_interval={v}"));
        }
        if let Some(v) = &self.seeds {
            pairs.push(format!("seeds={v}"));
        }
        if let Some(v) = &self.env {
            pairs.push(format!("env={v}"));
        }
        if let Some(v) = &self.output_dir {
            pairs.push(format!("output_dir={}", v.display()));
        }
        if let Some(v) = &self.dataset {
            pairs.push(format!("dataset={}", v.display()));
        }
        pairs.extend(self.set.iter().cloned());
        for p in &pairs {
            cfg.set_pair(p)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a bandit dataset as CSV with a metadata sidecar.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = BoxArg::Train)]
        r#box: BoxArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of a config and write results, summary and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue each seed from its latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a policy checkpoint (or the true mixture) with grouped Chamfer.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Omit to evaluate the true mixture (the noise floor).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        grouping: Option<String>,
    },
    /// Scatter plot of a policy checkpoint (or the true mixture) as SVG.
    Plot {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown table of total Chamfer across runs.
    Report {
        /// summary.csv files or run directories containing one.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_sampler(checkpoint: &Option<PathBuf>) -> Result<Option<srdp::policy::SrdpPolicy>> {
    checkpoint.as_ref().map(|p| Checkpoint::load(p)?.policy("policy")).transpose()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { cfg, seed, n, r#box, out } => {
            let cfg = cfg.resolve()?;
            let spec = cfg.bandit();
            let kind = match r#box {
                BoxArg::Train => BoxKind::Train,
                BoxArg::Test => BoxKind::Test,
            };
            let data = generate_dataset(&spec, n.unwrap_or(cfg.n_train), kind, seed, &mut stream_rng(seed, Stream::Data))?;
            data.write_csv(&out)?;
            println!("wrote {} records to {}", data.len(), out.display());
            Ok(true)
        }
        Command::Train { cfg, resume } => {
            let cfg = cfg.resolve()?;
            let outcome = run_experiment(&cfg, resume)?;
            for r in &outcome.runs {
                match &r.error {
                    None => {
                        let last = r.rows.last().expect("at least one evaluation");
                        println!("seed {}: iter {} total chamfer {:.4}", r.seed, last.iteration, last.report.total);
                    }
                    Some(e) => eprintln!("seed {} failed: {e}", r.seed),
                }
            }
            println!("results: {}", outcome.results_csv.display());
            Ok(outcome.all_succeeded())
        }
        Command::Eval { cfg, checkpoint, seed, grouping } => {
            let cfg = cfg.resolve()?;
            let spec = cfg.bandit();
            let grouping = grouping.as_deref().map(parse_grouping).transpose()?.unwrap_or(cfg.grouping);
            let policy = load_sampler(&checkpoint)?;
            let oracle = GmmOracle(&spec);
            let sampler: &dyn ActionSampler = match &policy {
                Some(p) => p,
                None => &oracle,
            };
            let report = grouped_chamfer(sampler, &spec, cfg.n_eval, cfg.m_ref, grouping, seed)?;
            let acc = quadrant_accuracy(sampler, &spec, cfg.n_accuracy, &mut stream_rng(seed, Stream::Accuracy))?;
            println!("group,chamfer");
            for (g, d) in &report.per_group {
                println!("{g},{d}");
            }
            println!("total,{}", report.total);
            println!("quadrant_accuracy,{acc}");
            Ok(true)
        }
        Command::Plot { cfg, checkpoint, n, seed, out } => {
            let cfg = cfg.resolve()?;
            let spec = cfg.bandit();
            let policy = load_sampler(&checkpoint)?;
            let oracle = GmmOracle(&spec);
            let sampler: &dyn ActionSampler = match &policy {
                Some(p) => p,
                None => &oracle,
            };
            emit_scatter_svg(sampler, &spec, n, seed, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Report { runs, out } => {
            let mut rows = Vec::new();
            for p in &runs {
                let path = if p.is_dir() { p.join("summary.csv") } else { p.clone() };
                rows.extend(read_summary(&path)?);
            }
            let t = table(&rows);
            match out {
                Some(path) => std::fs::write(path, &t)?,
                None => print!("{t}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
