//! Pose data model: joint sequences, the 17-joint body graph, synthetic
//! motion generation with camera projection, Gaussian noise injection, and
//! horizontal-flip augmentation.

pub mod io;
pub mod synth;
pub mod topology;
mod types;

pub use synth::{add_noise, hflip, project, synth_sequence, unproject_zero_depth, SynthConfig, NOISE_SWEEP_SIGMAS};
pub use topology::human_topology;
pub use types::{Camera, JointSequence2D, JointSequence3D, ProjectionKind, SkeletonTopology};
