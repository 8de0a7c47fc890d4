#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rfcnn::autodiff::{FloatWidth, Scalar};
use rfcnn::hardware::{count_devices, sequential_schedule, Arrangement};
use rfcnn::mnist::{load_split, Dataset, Split};
use rfcnn::training::{
    best_path, evaluate, load_checkpoint, metrics_path, network_from_checkpoint, Preset, TrainConfig, TrainError,
    Trainer,
};
use rfcnn::network::NetworkConfig;
use rfcnn::verify::{run_suite, SuiteOptions};
use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    /// Exit 2.
    Config(String),
    /// Exit 3.
    Data(String),
    /// Exit 4.
    Numeric(String),
    /// Exit 1.
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        use rfcnn::layers::ModelError;
        match e {
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) => CliError::Config(e.to_string()),
            TrainError::Data(_) | TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Model(_) => CliError::Numeric(e.to_string()),
            TrainError::Io { .. } => CliError::Other(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "rfcnn", version, about = "Train and inspect RF spintronic convolutional networks")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on MNIST and write a checkpoint, `<out>.best` and `<out>.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Evaluate a checkpoint on the test split and print JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Number of test images (default: the limit the model was trained with).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare every analytic derivative with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Device, line and frequency accounting for a network.
    HwReport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum, default_value_t = ArrangementArg::Crossbar)]
        arrangement: ArrangementArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArrangementArg {
    Crossbar,
    Compact,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: --threads ignored: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfcnn: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, data_dir, seed, out, preset } => {
            let r = config::resolve(config.as_deref(), preset.map(Into::into), seed)?;
            match r.network.float_width {
                FloatWidth::F32 => train::<f32>(&r.network, r.train, &data_dir, &out),
                FloatWidth::F64 => train::<f64>(&r.network, r.train, &data_dir, &out),
            }
        }
        Command::Eval { model, data_dir, limit } => eval(&model, &data_dir, limit),
        Command::Gradcheck { tolerance, seed, inject_fault } => gradcheck(tolerance, seed, inject_fault),
        Command::HwReport { config, preset, arrangement, format } => hw_report(config.as_deref(), preset, arrangement, format),
    }
}

fn load(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset, CliError> {
    let ds = load_split(dir, split).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn train<S: Scalar>(net: &NetworkConfig, cfg: TrainConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let train_set = load(data_dir, Split::Train, cfg.train_limit)?;
    let test_set = load(data_dir, Split::Test, cfg.test_limit)?;
    let mut trainer = Trainer::<S>::new(net, cfg)?;
    eprintln!(
        "training {} parameters on {} images, testing on {}",
        trainer.network().parameters().iter().map(|p| p.value.len()).sum::<usize>(),
        train_set.len(),
        test_set.len()
    );
    trainer.fit(&train_set, &test_set, Some(out), |epoch, tr, te| {
        eprintln!(
            "epoch {epoch}: train {:.2}% loss {:.4} | test {:.2}% loss {:.4}",
            tr.accuracy_percent, tr.mean_loss, te.accuracy_percent, te.mean_loss
        );
    })?;
    let last = trainer.metrics().rows.last().copied();
    let summary = json!({
        "checkpoint": out,
        "best_checkpoint": best_path(out),
        "metrics": metrics_path(out),
        "epochs": trainer.epoch(),
        "steps": trainer.steps(),
        "final_test_accuracy_percent": last.map(|r| r.accuracy_percent),
        "best_test_accuracy_percent": trainer.best_test_accuracy(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn eval(model: &Path, data_dir: &Path, limit: Option<usize>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(model).map_err(|e| CliError::Data(format!("{}: {e}", model.display())))?;
    let test = load(data_dir, Split::Test, limit.or(ckpt.meta.train.test_limit))?;
    let result = match ckpt.meta.network.float_width {
        FloatWidth::F32 => evaluate(&network_from_checkpoint::<f32>(&ckpt)?, &test)?,
        FloatWidth::F64 => evaluate(&network_from_checkpoint::<f64>(&ckpt)?, &test)?,
    };
    println!("{}", serde_json::to_string_pretty(&result).expect("json"));
    Ok(())
}

fn gradcheck(tolerance: f64, seed: u64, inject_fault: bool) -> Result<(), CliError> {
    if !(tolerance > 0.0) {
        return Err(CliError::Config(format!("tolerance {tolerance} must be > 0")));
    }
    let report = run_suite(&SuiteOptions { tolerance, seed, inject_fault }).map_err(|e| CliError::Other(e.to_string()))?;
    for c in &report.checks {
        println!(
            "{:<24} {} rel_err={:.3e} tol={:.1e} compared={} skipped={}",
            c.name,
            if c.passed { "ok  " } else { "FAIL" },
            c.relative_error,
            c.tolerance,
            c.compared,
            c.skipped
        );
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Other(format!("{failed} gradient check(s) failed")))
    }
}

fn hw_report(
    config: Option<&Path>,
    preset: Option<PresetArg>,
    arrangement: ArrangementArg,
    format: Format,
) -> Result<(), CliError> {
    let r = config::resolve(config, preset.map(Into::into), None)?;
    let arrangement = match arrangement {
        ArrangementArg::Crossbar => Arrangement::Crossbar,
        ArrangementArg::Compact => Arrangement::Compact,
    };
    let layout = count_devices(&r.network, arrangement).map_err(|e| CliError::Config(e.to_string()))?;
    let schedule = sequential_schedule(&r.network).map_err(|e| CliError::Config(e.to_string()))?;
    match format {
        Format::Text => print!("{}", layout.to_text()),
        Format::Json => {
            let v = json!({ "layout": layout, "schedule": schedule });
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        }
    }
    Ok(())
}
