//! Evaluation: sampling-based inference over a dataset, the zero-depth
//! baseline, the Gaussian-noise robustness sweep, and a throughput
//! benchmark.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::diffusion::{make_schedule, sample, TauSchedule};
use crate::dualstream::{init_params, resolve_handles, Backbone, BackboneDenoiser};
use crate::error::{Error, Result};
use crate::harness::checkpoint::CheckpointMeta;
use crate::harness::data::Dataset;
use crate::harness::rng::derive_seed;
use crate::metrics::{self, MetricsReport};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::skeleton::{add_noise, human_topology, unproject_zero_depth, Camera, JointSequence2D, JointSequence3D};

/// A checkpoint bound to an executable backbone.
pub struct Model<T: Scalar> {
    pub meta: CheckpointMeta,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
}

impl<T: Scalar> Model<T> {
    pub fn from_parts(meta: CheckpointMeta, store: ParamStore<T>) -> Result<Self> {
        let topo = human_topology();
        let handles = resolve_handles(&store, &meta.backbone)?;
        let backbone = Backbone::new(meta.backbone, &topo, handles)?;
        Ok(Model { meta, store, backbone })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, store) = crate::harness::checkpoint::load_checkpoint::<T>(path)?;
        Self::from_parts(meta, store)
    }
}

/// Runs the diffusion sampler on one 2D sequence and returns the predicted
/// root-relative pose in millimeters.
pub fn predict_sequence<T: Scalar>(
    model: &Model<T>,
    x2d: &JointSequence2D,
    steps: usize,
    seed: u64,
) -> Result<JointSequence3D> {
    let cfg = &model.meta.backbone;
    if x2d.frames() != cfg.frames || x2d.joints() != cfg.joints {
        return Err(Error::Config(format!(
            "sequence is {}x{}, checkpoint expects {}x{}",
            x2d.frames(),
            x2d.joints(),
            cfg.frames,
            cfg.joints
        )));
    }
    let sched = make_schedule(model.meta.diffusion_t, model.meta.schedule_kind()?)?;
    let tau = TauSchedule::uniform(steps, &sched)?;
    let mode = model.meta.coeff()?;
    let rows = cfg.frames * cfg.joints;
    let x = Tensor::<T>::from_f64_slice(vec![rows, 2], x2d.coords())?;
    let denoiser = BackboneDenoiser { backbone: &model.backbone, store: &model.store };
    let y = sample(&denoiser, &x, &tau, seed, &sched, mode)?;
    let mm: Vec<f64> = y.data().iter().map(|v| v.to_f64() * model.meta.pose_scale_mm).collect();
    let pose = JointSequence3D::new(cfg.frames, cfg.joints, mm)?;
    Ok(pose.to_root_relative(human_topology().root_index()))
}

/// Evaluates the model over a dataset: per-sequence sampling with derived
/// seeds, metrics against the root-relative ground truth.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, steps: usize, seed: u64) -> Result<MetricsReport> {
    data.validate()?;
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    let joints = data.joints();
    let mut frames_total = 0;
    for (i, (x2, y3)) in data.sequences.iter().enumerate() {
        let pred = predict_sequence(model, x2, steps, derive_seed(seed, "sample", i as u64))?;
        pred_all.extend_from_slice(pred.coords());
        let gt = y3.to_root_relative(human_topology().root_index());
        gt_all.extend_from_slice(gt.coords());
        frames_total += x2.frames();
    }
    let pred = JointSequence3D::new(frames_total, joints, pred_all)?;
    let gt = JointSequence3D::new(frames_total, joints, gt_all)?;
    metrics::report(&pred, &gt)
}

/// Ground-truth-as-prediction wiring check: bypasses the model entirely and
/// must score zero error.
pub fn evaluate_identity(data: &Dataset) -> Result<MetricsReport> {
    data.validate()?;
    let joints = data.joints();
    let root = human_topology().root_index();
    let mut gt_all = Vec::new();
    let mut frames_total = 0;
    for (_, y3) in &data.sequences {
        gt_all.extend_from_slice(y3.to_root_relative(root).coords());
        frames_total += y3.frames();
    }
    let gt = JointSequence3D::new(frames_total, joints, gt_all)?;
    metrics::report(&gt, &gt)
}

/// The zero-depth baseline: copy the 2D observation back through the
/// camera at the z = 0 plane, predict no depth, root-center.
pub fn zero_depth_baseline(data: &Dataset, cam: &Camera) -> Result<MetricsReport> {
    data.validate()?;
    let joints = data.joints();
    let root = human_topology().root_index();
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    let mut frames_total = 0;
    for (x2, y3) in &data.sequences {
        let pred = unproject_zero_depth(x2, cam)?.to_root_relative(root);
        pred_all.extend_from_slice(pred.coords());
        gt_all.extend_from_slice(y3.to_root_relative(root).coords());
        frames_total += x2.frames();
    }
    let pred = JointSequence3D::new(frames_total, joints, pred_all)?;
    let gt = JointSequence3D::new(frames_total, joints, gt_all)?;
    metrics::report(&pred, &gt)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// `(sigma, report)` rows, sigma strictly increasing, sigma = 0 first.
    pub rows: Vec<(f64, MetricsReport)>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        if self.rows.first().map(|(s, _)| *s) != Some(0.0) {
            return Err(Error::Config("sweep must start at the sigma = 0 baseline".into()));
        }
        for w in self.rows.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Config("sweep sigmas must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,mpjpe,p_mpjpe,pck150,auc\n");
        for (sigma, rep) in &self.rows {
            out.push_str(&format!("{},{}\n", sigma, rep.csv_row()));
        }
        out
    }
}

/// Evaluates at each noise level (plus the clean baseline), perturbing the
/// 2D inputs with seeded Gaussian noise.
pub fn noise_sweep<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    sigmas: &[f64],
    steps: usize,
    seed: u64,
) -> Result<SweepResult> {
    for w in sigmas.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config("noise sweep sigmas must be sorted ascending".into()));
        }
    }
    if sigmas.first().is_some_and(|&s| s <= 0.0) {
        return Err(Error::Config("noise sweep sigmas must be positive (the zero baseline is implicit)".into()));
    }
    let mut rows = Vec::with_capacity(sigmas.len() + 1);
    rows.push((0.0, evaluate(model, data, steps, seed)?));
    for (si, &sigma) in sigmas.iter().enumerate() {
        let noisy = Dataset {
            sequences: data
                .sequences
                .iter()
                .enumerate()
                .map(|(i, (x2, y3))| {
                    let noise_seed = derive_seed(seed, "sweep", (si * data.len() + i) as u64);
                    Ok((add_noise(x2, sigma, noise_seed)?, y3.clone()))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        rows.push((sigma, evaluate(model, &noisy, steps, seed)?));
    }
    let result = SweepResult { rows };
    result.validate()?;
    Ok(result)
}

pub fn write_sweep_csv(path: impl AsRef<Path>, sweep: &SweepResult) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(sweep.to_csv().as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub window_frames: usize,
    pub repeats: usize,
    pub median_fps: f64,
    pub min_fps: f64,
    pub max_fps: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "window {} frames, {} repeats: median {:.1} frames/s (spread {:.1}..{:.1}); hardware-dependent, no pass/fail threshold",
            self.window_frames, self.repeats, self.median_fps, self.min_fps, self.max_fps
        )
    }
}

/// Wall-clock throughput of 2D-to-3D inference over windows of
/// `window_frames` frames. When the requested window differs from the
/// checkpoint geometry, a freshly initialized model of the same dimensions
/// is timed instead (throughput does not depend on the trained values).
pub fn bench<T: Scalar>(model: &Model<T>, window_frames: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    let mut meta = model.meta.clone();
    let rebuilt;
    let timed: &Model<T> = if window_frames == model.meta.backbone.frames {
        model
    } else {
        meta.backbone.frames = window_frames;
        meta.backbone.validate()?;
        let (store, handles) = init_params::<T>(&meta.backbone, derive_seed(seed, "bench-init", 0))?;
        let backbone = Backbone::new(meta.backbone, &human_topology(), handles)?;
        rebuilt = Model { meta, store, backbone };
        &rebuilt
    };
    let synth = crate::skeleton::SynthConfig { frames: window_frames, ..Default::default() };
    let (_, x2d) = crate::skeleton::synth_sequence(&synth, derive_seed(seed, "bench-data", 0))?;
    let steps = timed.meta.sampling_steps;
    // warmup
    predict_sequence(timed, &x2d, steps, derive_seed(seed, "bench", u64::MAX))?;
    let mut fps = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let t0 = Instant::now();
        let out = predict_sequence(timed, &x2d, steps, derive_seed(seed, "bench", r as u64))?;
        let dt = t0.elapsed().as_secs_f64();
        if !out.all_finite() || dt <= 0.0 {
            return Err(Error::Numeric("benchmark produced a degenerate timing".into()));
        }
        fps.push(window_frames as f64 / dt);
    }
    fps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if repeats % 2 == 1 {
        fps[repeats / 2]
    } else {
        0.5 * (fps[repeats / 2 - 1] + fps[repeats / 2])
    };
    Ok(BenchReport {
        window_frames,
        repeats,
        median_fps: median,
        min_fps: fps[0],
        max_fps: *fps.last().unwrap(),
    })
}

/// Total learnable parameter count for a backbone configuration.
pub fn param_count(cfg: &crate::dualstream::BackboneConfig) -> Result<usize> {
    crate::dualstream::param_count(cfg)
}
