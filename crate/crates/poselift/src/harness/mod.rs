//! Training, evaluation, the noise-robustness sweep, throughput
//! benchmarking, and the parameter-count report, plus the configuration and
//! checkpoint formats that tie them together.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod rng;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{Precision, RunConfig};
pub use data::{generate, load_dir, save_dir, Dataset};
pub use eval::{
    bench, evaluate, evaluate_identity, noise_sweep, param_count, predict_sequence, write_sweep_csv,
    zero_depth_baseline, BenchReport, Model, SweepResult,
};
pub use rng::derive_seed;
pub use train::{train, TrainOutput};
