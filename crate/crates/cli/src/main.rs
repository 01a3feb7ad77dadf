use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use amnet::harness::checkpoint::{load_checkpoint, save_checkpoint};
use amnet::harness::data::{generate_synthetic, write_dataset};
use amnet::harness::eval::{export_traces, read_trace_costs};
use amnet::harness::{evaluate, load_datasets, train, ExperimentConfig};
use amnet::latency::{backlog_sequence, DeviceProfile};
use amnet::transducer::{CompressionMethod, TransducerModel};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "amnet", version, about = "Amortized branched transducer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full curriculum: baseline, branches, arbitrator, L_avg, L_amr.
    Train(TrainArgs),
    /// Decode the dev set with a checkpoint and report metrics.
    Evaluate(EvaluateArgs),
    /// Build an amortized model from a dense checkpoint.
    Seed(SeedArgs),
    /// Replay stored per-frame costs through the latency model.
    Simulate(SimulateArgs),
    /// Write synthetic train/dev feature and label files.
    GenData(GenDataArgs),
    /// Print the effective configuration.
    Config(ConfigArgs),
}

/// Configuration file plus `section.key=value` overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.avg_steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.overrides.is_empty() {
            cfg = apply_overrides(&cfg, &self.overrides)?;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root: toml::Table = toml::from_str(&cfg.to_toml())?;
    for item in overrides {
        let (key, raw) = item.split_once('=').with_context(|| format!("override {item:?} needs KEY=VALUE"))?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_owned()),
        };
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let leaf = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in {item:?}"))?;
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .with_context(|| format!("{p} in {key} is not a section"))?;
        }
        table.insert(leaf.to_owned(), value);
    }
    Ok(ExperimentConfig::from_toml_str(&toml::to_string(&root)?)?)
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Where checkpoints, metrics and traces go.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dense checkpoint to report reductions against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Append the JSON report to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write per-frame decisions and backlog as CSV.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sparse,
    Factorized,
}

#[derive(Args)]
struct SeedArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dense checkpoint to copy weights from.
    #[arg(long)]
    baseline: PathBuf,
    /// Defaults to the configured method.
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Trace CSV written by `train` or `evaluate`.
    #[arg(long)]
    traces: PathBuf,
    /// Device throughput in FLOPs per second.
    #[arg(long)]
    mu: f64,
    /// Seconds of audio per frame.
    #[arg(long, default_value_t = 0.03)]
    frame_period: f64,
    /// Print one line per utterance.
    #[arg(long)]
    per_utterance: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Receives `train/` and `dev/` subdirectories.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Seed(a) => run_seed(a),
        Command::Simulate(a) => run_simulate(a),
        Command::GenData(a) => run_gen_data(a),
        Command::Config(a) => {
            print!("{}", a.load()?.to_toml());
            Ok(())
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if a.out_dir.is_some() {
        cfg.run.out_dir = a.out_dir;
    }
    let out = train(&cfg)?;
    println!("lambda_avg {:.4e} lambda_amr {:.4e} pretrain_slow {:.3}", out.lambda_avg, out.lambda_amr, out.pretrain_slow_fraction);
    for r in [&out.baseline_report, &out.avg_report, &out.amr_report] {
        println!("{}", r.to_json_line());
    }
    if let Some(dir) = &cfg.run.out_dir {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_datasets(&cfg)?;
    let profile = cfg.device_profile()?;
    let width = a.beam_width.unwrap_or(cfg.eval.beam_width);
    let reference = match &a.baseline {
        Some(p) => {
            let base = load_checkpoint(p)?;
            Some(evaluate(&base, &data.dev, &profile, width, "baseline", None)?.0.baseline())
        }
        None => None,
    };
    let (report, traces) = evaluate(&model, &data.dev, &profile, width, &a.label, reference)?;
    let line = report.to_json_line();
    println!("{line}");
    if let Some(p) = &a.metrics {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{line}")?;
    }
    if let Some(p) = &a.traces {
        export_traces(p, &traces)?;
    }
    Ok(())
}

fn run_seed(a: SeedArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let dense = load_checkpoint(&a.baseline)?;
    if dense.amortized().is_some() {
        bail!("{} is already an amortized model", a.baseline.display());
    }
    let method = match a.method {
        Some(Method::Sparse) => CompressionMethod::Sparse,
        Some(Method::Factorized) => CompressionMethod::Factorized,
        None => cfg.amortized.method,
    };
    let mut model =
        TransducerModel::seed_from_dense(&dense, method, &cfg.targets(), cfg.amortized.arbitrator, cfg.run.seed)?;
    model.set_decision_lag(cfg.amortized.decision_lag);
    model.set_cost_relaxation(cfg.amortized.cost_relaxation);
    save_checkpoint(&a.out, &model)?;
    let costs = model.encoder_costs();
    println!(
        "branch FLOPs/frame {:?}, arbitrator {}, encoder params {}, arbitrator params {}",
        costs.branches,
        costs.arbitrator,
        model.encoder_param_count(),
        model.arbitrator_param_count()
    );
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let profile = DeviceProfile::from_frame_period(a.mu, a.frame_period)?;
    let traces = read_trace_costs(&a.traces)?;
    if traces.is_empty() {
        bail!("{} holds no frames", a.traces.display());
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    let mut flops = 0.0;
    for (id, q) in &traces {
        let trace = backlog_sequence(q, &profile)?;
        total += trace.latency();
        frames += q.len();
        flops += q.iter().sum::<f64>();
        if a.per_utterance {
            println!("{id} frames {} latency_ms {:.3}", q.len(), 1000.0 * trace.latency());
        }
    }
    println!(
        "utterances {} frames {frames} mean_flops_per_frame {:.1} budget {:.1} mean_latency_ms {:.3}",
        traces.len(),
        flops / frames as f64,
        profile.budget(),
        1000.0 * total / traces.len() as f64
    );
    Ok(())
}

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let d = &cfg.data;
    let write = |dir: &Path, count: usize, seed: u64| -> Result<()> {
        let data = generate_synthetic(&d.task, count, seed)?;
        write_dataset(dir, &data)?;
        println!("{}: {} utterances, {} frames", dir.display(), data.len(), data.frame_count());
        Ok(())
    };
    write(&a.out_dir.join("train"), d.train_utterances, d.seed)?;
    write(&a.out_dir.join("dev"), d.dev_utterances, d.dev_seed())?;
    Ok(())
}
