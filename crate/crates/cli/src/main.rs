mod config_file;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapemoe_core::metrics::{self, RoutingMode};
use shapemoe_core::sweep::{self, SweepAxis};
use shapemoe_core::synth_data::{self, GenConfig, ShapeFamily};
use shapemoe_core::trainer::{self, AdamConfig, TrainConfig, Trainer};
use shapemoe_core::Error;

/// Shape-aware sparse mixture-of-experts for amodal segmentation.
#[derive(Parser, Debug)]
#[command(name = "shapemoe", version, args_override_self = true)]
struct Cli {
    /// TOML file of flag values; explicit flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic occlusion dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Write the per-sample routing table as CSV.
    Inspect(InspectArgs),
    /// Train one model per (value, seed) and summarize.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    unoccluded_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Number of experts K.
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Experts selected per sample k.
    #[arg(long, default_value_t = 1)]
    topk: usize,
    #[arg(long, default_value_t = 20)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    balance_weight: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
}

impl ModelArgs {
    fn config(&self, seed: u64, side: usize) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            balance_weight: self.balance_weight,
            ..TrainConfig::default()
        };
        cfg.model.experts = self.experts;
        cfg.model.topk = self.topk;
        cfg.model.latent_dim = self.latent_dim;
        cfg.model.side = side;
        cfg
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint up to `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RoutingArgs {
    /// Sample the latent code instead of routing on its mean.
    #[arg(long)]
    stochastic_routing: bool,
    #[arg(long, default_value_t = 0)]
    routing_seed: u64,
}

impl RoutingArgs {
    fn mode(&self) -> RoutingMode {
        if self.stochastic_routing {
            RoutingMode::Stochastic { seed: self.routing_seed }
        } else {
            RoutingMode::Mean
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    routing: RoutingArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    #[command(flatten)]
    routing: RoutingArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::ConfigMismatch(_) => 1,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::DegenerateDistribution => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("i/o error on {}: {e}", path.display()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn histogram_line(h: &[usize; ShapeFamily::COUNT]) -> String {
    ShapeFamily::ALL
        .iter()
        .map(|f| format!("{}={}", f.name(), h[f.index()]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    let cfg = GenConfig {
        seed: a.seed,
        count: a.count,
        side: a.size,
        unoccluded_prob: a.unoccluded_prob,
        noise_sigma: a.noise_sigma,
        ..GenConfig::default()
    };
    let data = synth_data::generate_corpus(&cfg)?;
    synth_data::write_dataset(&data, &a.out)?;
    synth_data::write_manifest(&data, &cfg, &a.out)?;
    println!("wrote {} records to {}", data.len(), a.out.display());
    println!("families: {}", histogram_line(&data.family_histogram()));
    Ok(())
}

fn load_pair(train: &Path, val: &Path) -> Result<(synth_data::Dataset, synth_data::Dataset), Failure> {
    let t = synth_data::read_dataset(train)?;
    let v = synth_data::read_dataset(val)?;
    if !v.is_empty() && (t.height, t.width) != (v.height, v.width) {
        return Err(Error::ConfigMismatch(format!(
            "training data is {}×{}, validation data is {}×{}",
            t.height, t.width, v.height, v.width
        ))
        .into());
    }
    if t.is_empty() {
        return Err(Error::Config("training set is empty".into()).into());
    }
    Ok((t, v))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let (train_set, val_set) = load_pair(&a.data, &a.val)?;
    let cfg = a.model.config(a.seed, train_set.height);
    let mut t = match &a.resume {
        Some(path) => {
            let ckpt = trainer::load_checkpoint(path)?;
            ckpt.check_compatible(&cfg.model)?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config.epochs = cfg.epochs;
            t
        }
        None => Trainer::new(cfg)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let file = if a.resume.is_some() {
        File::options().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut sink_err = None;
    let result = t.run(&train_set, &val_set, |entry, _| {
        let line = serde_json::to_string(entry)?;
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            sink_err = Some(io_err(&log_path, e));
        }
        println!(
            "epoch {} loss {:.4} val mIoU full {} occ {}",
            entry.epoch,
            entry.train_loss,
            entry.val_miou_full.map_or("-".into(), |v| format!("{v:.4}")),
            entry.val_miou_occ.map_or("-".into(), |v| format!("{v:.4}")),
        );
        Ok(())
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    result?;
    trainer::save_checkpoint(&t.checkpoint(), &a.out)?;
    println!("wrote checkpoint {} and log {}", a.out.display(), log_path.display());
    Ok(())
}

fn load_for(ckpt: &Path, data: &Path) -> Result<(trainer::Checkpoint, synth_data::Dataset), Failure> {
    let ckpt = trainer::load_checkpoint(ckpt)?;
    let data = synth_data::read_dataset(data)?;
    let side = ckpt.config.model.side;
    if (data.height, data.width) != (side, side) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {side}×{side} scenes, dataset has {}×{}",
            data.height, data.width
        ))
        .into());
    }
    Ok((ckpt, data))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (ckpt, data) = load_for(&a.ckpt, &a.data)?;
    let report = metrics::evaluate(&ckpt.model, &data, a.routing.mode())?;
    let mut json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    json.push('\n');
    write_file(&a.report, json.as_bytes())?;
    println!(
        "mIoU full {:.4} occ {} entropy {:.3} purity {:.3}",
        report.miou_full,
        report.miou_occ.map_or("-".into(), |v| format!("{v:.4}")),
        report.utilization_entropy_normalized,
        report.purity
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let (ckpt, data) = load_for(&a.ckpt, &a.data)?;
    let csv = metrics::routing_table(&ckpt.model, &data, a.routing.mode())?;
    write_file(&a.csv, csv.as_bytes())?;
    println!("wrote {} rows to {}", data.len(), a.csv.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Failure> {
    let (train_set, val_set) = load_pair(&a.data, &a.val)?;
    let base = a.model.config(0, train_set.height);
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let runs_path = a.out.join("runs.jsonl");
    let mut runs_file = BufWriter::new(File::create(&runs_path).map_err(|e| io_err(&runs_path, e))?);
    let mut sink_err = None;
    let runs = sweep::run_sweep(a.axis, &a.values, &a.seeds, &base, &train_set, &val_set, |r| {
        let line = serde_json::to_string(r).expect("run records serialize");
        if let Err(e) = writeln!(runs_file, "{line}").and_then(|_| runs_file.flush()) {
            sink_err = Some(io_err(&runs_path, e));
        }
        match (&r.report, &r.error) {
            (Some(rep), _) => println!(
                "{}={} seed {}: mIoU full {:.4} occ {} ({:.0}s)",
                a.axis,
                r.value,
                r.seed,
                rep.miou_full,
                rep.miou_occ.map_or("-".into(), |v| format!("{v:.4}")),
                r.seconds
            ),
            (None, Some(e)) => eprintln!("{}={} seed {} failed: {e}", a.axis, r.value, r.seed),
            (None, None) => {}
        }
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let rows = sweep::summarize(a.axis, &a.values, &runs);
    let summary = a.out.join("summary.csv");
    write_file(&summary, sweep::summary_csv(&rows)?.as_bytes())?;
    println!("wrote {}", summary.display());
    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{failed} of {} runs failed", runs.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
