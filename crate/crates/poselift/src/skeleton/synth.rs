//! Synthetic motion generation, camera projection, noise injection, and
//! horizontal-flip augmentation.
//!
//! Sequences are produced by forward kinematics over the rest skeleton:
//! every bone carries a sinusoidal joint-angle oscillation with
//! per-sequence random axis, amplitude, period, and phase, plus a slow
//! whole-body yaw. Animating angles instead of positions keeps bone
//! lengths exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::skeleton::topology::{human_topology, rest_offsets};
use crate::skeleton::types::{Camera, JointSequence2D, JointSequence3D, ProjectionKind, SkeletonTopology};

/// Configuration of the synthetic motion generator.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub frames: usize,
    /// Scale of all joint-angle oscillations, radians. Zero yields the
    /// static rest pose.
    pub amplitude: f64,
    /// Minimum oscillation period, frames.
    pub period_min: f64,
    /// Maximum oscillation period, frames.
    pub period_max: f64,
    pub camera: Camera,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { frames: 27, amplitude: 0.5, period_min: 12.0, period_max: 50.0, camera: Camera::default() }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synth frames must be >= 1".into()));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::Config(format!("synth amplitude must be non-negative, got {}", self.amplitude)));
        }
        if !(self.period_min > 0.0) || !(self.period_max >= self.period_min) {
            return Err(Error::Config(format!(
                "synth periods must satisfy 0 < min <= max, got {}..{}",
                self.period_min, self.period_max
            )));
        }
        self.camera.validate()
    }
}

/// Generates one root-relative 3D sequence and its 2D camera projection.
/// Deterministic given the seed.
pub fn synth_sequence(cfg: &SynthConfig, seed: u64) -> Result<(JointSequence3D, JointSequence2D)> {
    cfg.validate()?;
    let topo = human_topology();
    let offsets = rest_offsets();
    let j = topo.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-sequence motion parameters. All angles scale with cfg.amplitude so
    // amplitude = 0 degenerates to the rest pose exactly. The whole-body yaw
    // and pitch dominate so sequences carry substantial depth variation.
    let base_yaw = cfg.amplitude * rng.random_range(-1.3..1.3);
    let yaw_amp = cfg.amplitude * rng.random_range(0.15..0.7);
    let yaw_period = rng.random_range(cfg.period_min..=cfg.period_max);
    let yaw_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let base_pitch = cfg.amplitude * rng.random_range(-0.55..0.55);

    let mut axes = vec![[0.0f64; 3]; j];
    let mut amps = vec![0.0f64; j];
    let mut periods = vec![1.0f64; j];
    let mut phases = vec![0.0f64; j];
    for jj in 0..j {
        // random unit axis
        let mut a = [0.0f64; 3];
        loop {
            for v in a.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            if n > 1e-3 {
                for v in a.iter_mut() {
                    *v /= n;
                }
                break;
            }
        }
        axes[jj] = a;
        amps[jj] = cfg.amplitude * rng.random_range(0.1..0.55);
        periods[jj] = rng.random_range(cfg.period_min..=cfg.period_max);
        phases[jj] = rng.random_range(0.0..std::f64::consts::TAU);
    }

    let order = topo.topological_order();
    let parents = topo.parents();
    let mut abs = JointSequence3D::zeros(cfg.frames, j);
    for f in 0..cfg.frames {
        let t = f as f64;
        let yaw = base_yaw + yaw_amp * (std::f64::consts::TAU * t / yaw_period + yaw_phase).sin();
        let root_rot = mat_mul3(
            &axis_angle_matrix([0.0, 1.0, 0.0], yaw),
            &axis_angle_matrix([1.0, 0.0, 0.0], base_pitch),
        );

        let mut orients = vec![[[0.0f64; 3]; 3]; j];
        let mut positions = vec![[0.0f64; 3]; j];
        for &jj in &order {
            match parents[jj] {
                None => {
                    orients[jj] = root_rot;
                    positions[jj] = [0.0, 0.0, 0.0];
                }
                Some(p) => {
                    let angle = amps[jj] * (std::f64::consts::TAU * t / periods[jj] + phases[jj]).sin();
                    let local = axis_angle_matrix(axes[jj], angle);
                    orients[jj] = mat_mul3(&orients[p], &local);
                    let off = rotate(&orients[jj], &offsets[jj]);
                    positions[jj] = [
                        positions[p][0] + off[0],
                        positions[p][1] + off[1],
                        positions[p][2] + off[2],
                    ];
                }
            }
        }
        for jj in 0..j {
            abs.set(f, jj, positions[jj]);
        }
    }

    let pose3d = abs.to_root_relative(topo.root_index());
    let pose2d = project(&pose3d, &cfg.camera)?;
    Ok((pose3d, pose2d))
}

/// Projects a 3D sequence to normalized image coordinates.
pub fn project(pose: &JointSequence3D, cam: &Camera) -> Result<JointSequence2D> {
    cam.validate()?;
    let mut out = JointSequence2D::zeros(pose.frames(), pose.joints());
    for f in 0..pose.frames() {
        for j in 0..pose.joints() {
            let [x, y, z] = pose.get(f, j);
            let p = match cam.kind {
                ProjectionKind::Orthographic => [cam.focal * x, cam.focal * y],
                ProjectionKind::Pinhole => {
                    let depth = z + cam.depth_offset;
                    if depth <= 0.0 {
                        return Err(Error::Projection(format!(
                            "non-positive camera-space depth {} at frame {} joint {}",
                            depth, f, j
                        )));
                    }
                    [cam.focal * x / depth, cam.focal * y / depth]
                }
            };
            out.set(f, j, p);
        }
    }
    Ok(out)
}

/// Inverse of `project` under the assumption that every joint lies on the
/// z = 0 plane. This is the zero-depth baseline predictor: copy the 2D
/// observation, predict no depth.
pub fn unproject_zero_depth(pose: &JointSequence2D, cam: &Camera) -> Result<JointSequence3D> {
    cam.validate()?;
    let mut out = JointSequence3D::zeros(pose.frames(), pose.joints());
    for f in 0..pose.frames() {
        for j in 0..pose.joints() {
            let [u, v] = pose.get(f, j);
            let p = match cam.kind {
                ProjectionKind::Orthographic => [u / cam.focal, v / cam.focal, 0.0],
                ProjectionKind::Pinhole => {
                    [u * cam.depth_offset / cam.focal, v * cam.depth_offset / cam.focal, 0.0]
                }
            };
            out.set(f, j, p);
        }
    }
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma` to
/// every coordinate. Deterministic given the seed.
pub fn add_noise(pose: &JointSequence2D, sigma: f64, seed: u64) -> Result<JointSequence2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {}", sigma)));
    }
    let mut out = pose.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.coords_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    Ok(out)
}

/// The noise levels of the robustness sweep, in normalized image units.
pub const NOISE_SWEEP_SIGMAS: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];

/// Horizontal flip: negates the x coordinate of every joint and swaps each
/// mirror pair's data, in both the 2D and 3D sequences.
pub fn hflip(
    pose2d: &JointSequence2D,
    pose3d: &JointSequence3D,
    topo: &SkeletonTopology,
) -> Result<(JointSequence2D, JointSequence3D)> {
    if pose2d.joints() != topo.joint_count() || pose3d.joints() != topo.joint_count() {
        return Err(Error::Topology(format!(
            "joint counts ({}, {}) do not match topology ({})",
            pose2d.joints(),
            pose3d.joints(),
            topo.joint_count()
        )));
    }
    for &(l, r) in topo.mirror_pairs() {
        if l >= topo.joint_count() || r >= topo.joint_count() {
            return Err(Error::Topology(format!("mirror pair ({}, {}) out of range", l, r)));
        }
    }
    let mut out2d = pose2d.clone();
    let mut out3d = pose3d.clone();
    for f in 0..pose2d.frames() {
        for j in 0..pose2d.joints() {
            let [x, y] = pose2d.get(f, j);
            out2d.set(f, j, [-x, y]);
        }
        for &(l, r) in topo.mirror_pairs() {
            let a = out2d.get(f, l);
            let b = out2d.get(f, r);
            out2d.set(f, l, b);
            out2d.set(f, r, a);
        }
    }
    for f in 0..pose3d.frames() {
        for j in 0..pose3d.joints() {
            let [x, y, z] = pose3d.get(f, j);
            out3d.set(f, j, [-x, y, z]);
        }
        for &(l, r) in topo.mirror_pairs() {
            let a = out3d.get(f, l);
            let b = out3d.get(f, r);
            out3d.set(f, l, b);
            out3d.set(f, r, a);
        }
    }
    Ok((out2d, out3d))
}

fn axis_angle_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][k] + a[i][1] * b[1][k] + a[i][2] * b[2][k];
        }
    }
    out
}

fn rotate(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}
