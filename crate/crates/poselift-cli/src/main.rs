//! Command-line harness: synthetic data generation, training, evaluation,
//! the noise-robustness sweep, throughput benchmarking, and the
//! parameter-count report.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numeric
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poselift::harness::{self, Model, Precision, RunConfig};
use poselift::skeleton::{SynthConfig, NOISE_SWEEP_SIGMAS};
use poselift::{Error, Result};

#[derive(Parser)]
#[command(
    name = "poselift",
    about = "2D-to-3D pose lifting with a dual-stream backbone and diffusion refinement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. `--set backbone.depth=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_kv(&text)?;
        }
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set needs KEY=VALUE, got '{}'", kv)));
            };
            cfg.set_key(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pose sequences as JSONL file pairs.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; train/ and test/ subdirectories are created.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint, loss log, and resolved config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with pose files from gen-data; synthesized when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with pose files; synthesized test data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sampling steps of the reverse process (checkpoint default otherwise).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f64")]
        precision: String,
        /// Where to write the JSON report (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate across the Gaussian-noise sweep and write a CSV.
    NoiseSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated sigma list (the zero baseline is implicit).
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Measure 2D-to-3D inference throughput.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames per timed window.
        #[arg(long, default_value_t = 243)]
        window: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f32")]
        precision: String,
    },
    /// Report the learnable parameter count of a configuration.
    ParamCount {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn synth_from(cfg: &RunConfig) -> SynthConfig {
    SynthConfig { frames: cfg.backbone.frames, amplitude: cfg.amplitude, ..Default::default() }
}

fn load_data(dir: &Option<PathBuf>, cfg: &RunConfig, purpose: &str, count: usize) -> Result<harness::Dataset> {
    match dir {
        Some(d) => harness::load_dir(d),
        None => harness::generate(count, &synth_from(cfg), cfg.seed, purpose),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let synth = synth_from(&cfg);
            let train = harness::generate(cfg.train_sequences, &synth, cfg.seed, "train")?;
            let test = harness::generate(cfg.test_sequences, &synth, cfg.seed, "test")?;
            std::fs::create_dir_all(&out)?;
            harness::save_dir(out.join("train"), &train)?;
            harness::save_dir(out.join("test"), &test)?;
            std::fs::write(out.join("gen_config.txt"), cfg.to_kv())?;
            println!(
                "wrote {} train and {} test sequences ({} frames x {} joints) under {}",
                train.len(),
                test.len(),
                cfg.backbone.frames,
                cfg.backbone.joints,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let dataset = load_data(&data, &cfg, "train", cfg.train_sequences)?;
            let result = harness::train(&cfg, &dataset, &out)?;
            println!("checkpoint: {}", result.checkpoint_path.display());
            println!("loss log:   {}", result.loss_log_path.display());
            if let (Some(first), Some(last)) = (result.epoch_losses.first(), result.epoch_losses.last()) {
                println!("loss: {:.6} -> {:.6} over {} epochs", first, last, result.epoch_losses.len());
            }
        }
        Command::Eval { checkpoint, data, steps, seed, precision, out, config } => {
            let cfg = config.resolve()?;
            let report = match precision.parse::<Precision>()? {
                Precision::F64 => {
                    let model = Model::<f64>::load(&checkpoint)?;
                    let steps = steps.unwrap_or(model.meta.sampling_steps);
                    let dataset = load_data(&data, &cfg, "test", cfg.test_sequences)?;
                    harness::evaluate(&model, &dataset, steps, seed)?
                }
                Precision::F32 => {
                    let model = Model::<f32>::load(&checkpoint)?;
                    let steps = steps.unwrap_or(model.meta.sampling_steps);
                    let dataset = load_data(&data, &cfg, "test", cfg.test_sequences)?;
                    harness::evaluate(&model, &dataset, steps, seed)?
                }
            };
            let json = report.to_json();
            match out {
                Some(path) => std::fs::write(path, &json)?,
                None => println!("{}", json),
            }
            eprintln!(
                "mpjpe {:.2}mm | p-mpjpe {:.2}mm | pck150 {:.2}% | auc {:.2}%",
                report.mpjpe, report.p_mpjpe, report.pck_150, report.auc
            );
        }
        Command::NoiseSweep { checkpoint, data, sigmas, steps, seed, precision, out, config } => {
            let cfg = config.resolve()?;
            let sigma_list: Vec<f64> = match sigmas {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad sigma '{}'", v))))
                    .collect::<Result<_>>()?,
                None => NOISE_SWEEP_SIGMAS.to_vec(),
            };
            let sweep = match precision.parse::<Precision>()? {
                Precision::F64 => {
                    let model = Model::<f64>::load(&checkpoint)?;
                    let steps = steps.unwrap_or(model.meta.sampling_steps);
                    let dataset = load_data(&data, &cfg, "test", cfg.test_sequences)?;
                    harness::noise_sweep(&model, &dataset, &sigma_list, steps, seed)?
                }
                Precision::F32 => {
                    let model = Model::<f32>::load(&checkpoint)?;
                    let steps = steps.unwrap_or(model.meta.sampling_steps);
                    let dataset = load_data(&data, &cfg, "test", cfg.test_sequences)?;
                    harness::noise_sweep(&model, &dataset, &sigma_list, steps, seed)?
                }
            };
            harness::write_sweep_csv(&out, &sweep)?;
            println!("{}", sweep.to_csv().trim_end());
            eprintln!("wrote {}", out.display());
        }
        Command::Bench { checkpoint, window, repeats, seed, precision } => {
            let report = match precision.parse::<Precision>()? {
                Precision::F64 => {
                    let model = Model::<f64>::load(&checkpoint)?;
                    harness::bench(&model, window, repeats, seed)?
                }
                Precision::F32 => {
                    let model = Model::<f32>::load(&checkpoint)?;
                    harness::bench(&model, window, repeats, seed)?
                }
            };
            println!("{}", report.summary());
        }
        Command::ParamCount { config } => {
            let cfg = config.resolve()?;
            let count = harness::param_count(&cfg.backbone)?;
            println!(
                "{} parameters (d={}, d'={}, depth={}, frames={}, joints={})",
                count, cfg.backbone.d, cfg.backbone.d_prime, cfg.backbone.depth, cfg.backbone.frames, cfg.backbone.joints
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
