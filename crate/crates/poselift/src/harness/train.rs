//! Training loop: x0-prediction objective over the batched backbone with
//! adaptive-moment updates, decoupled weight decay, per-epoch learning-rate
//! decay, and horizontal-flip augmentation. Fully reproducible given the
//! seed: every random draw comes from a stream derived from
//! `(seed, purpose, index)` and all reductions are sequential.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{make_schedule, DiffusionSchedule};
use crate::dualstream::{init_params, Backbone, ForwardInput};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::harness::config::{Precision, RunConfig};
use crate::harness::data::Dataset;
use crate::harness::rng::derive_seed;
use crate::numerics::tape::{Mode, Tape};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor};
use crate::skeleton::{hflip, human_topology, JointSequence2D, JointSequence3D};

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub config_path: PathBuf,
    /// Mean training loss per epoch, in pose units.
    pub epoch_losses: Vec<f64>,
}

/// Adam with coupled weight decay (the decay enters the gradient before
/// the moment estimates).
struct Adam<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> Adam<T> {
    fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.tensor(id).shape().to_vec())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.tensor(id).shape().to_vec())).collect();
        Adam { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    fn apply(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let bc2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        for (id, g) in grads {
            let idx = id_index(*id);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = store.tensor_mut(*id).data_mut();
            for i in 0..g.len() {
                let gi = g[i] + wd * p[i];
                m[i] = b1 * m[i] + one_minus_b1 * gi;
                v[i] = b2 * v[i] + one_minus_b2 * gi * gi;
                let mhat = m[i] * bc1;
                let vhat = v[i] * bc2;
                p[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn id_index(id: ParamId) -> usize {
    // ParamIds are dense indices into the store's registration order
    let ParamId(i) = id;
    i
}

/// Converts one sequence pair to model tensors, optionally flipped, with
/// poses scaled to model units.
fn to_tensors<T: Scalar>(
    x2: &JointSequence2D,
    y3: &JointSequence3D,
    pose_scale_mm: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let rows = x2.frames() * x2.joints();
    let x = Tensor::<T>::from_f64_slice(vec![rows, 2], x2.coords())?;
    let mut y = vec![T::ZERO; rows * 3];
    for (o, &v) in y.iter_mut().zip(y3.coords()) {
        *o = T::from_f64(v / pose_scale_mm);
    }
    Ok((x, Tensor::new(vec![rows, 3], y)?))
}

/// Trains on the dataset and writes the checkpoint, a per-epoch loss CSV,
/// and the resolved configuration into `out_dir`.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: impl AsRef<Path>) -> Result<TrainOutput> {
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg, data, out_dir.as_ref()),
        Precision::F32 => train_typed::<f32>(cfg, data, out_dir.as_ref()),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    data.validate()?;
    if data.frames() != cfg.backbone.frames || data.joints() != cfg.backbone.joints {
        return Err(Error::Config(format!(
            "dataset geometry {}x{} does not match config {}x{}",
            data.frames(),
            data.joints(),
            cfg.backbone.frames,
            cfg.backbone.joints
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let topo = human_topology();
    if topo.joint_count() != cfg.backbone.joints {
        return Err(Error::Config("training expects the 17-joint body topology".into()));
    }
    let sched = make_schedule(cfg.diffusion_t, cfg.schedule)?;
    let (mut store, handles) = init_params::<T>(&cfg.backbone, derive_seed(cfg.seed, "init", 0))?;
    let backbone = Backbone::new(cfg.backbone, &topo, handles)?;
    let mut opt = Adam::new(&store, cfg.weight_decay);

    let n = data.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        // deterministic shuffle
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_batch::<T>(
                cfg,
                &backbone,
                &mut store,
                &mut opt,
                &sched,
                data,
                chunk,
                epoch,
                batch_idx,
                lr,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    // diagnostic dump of the offending batch
                    let dump = out_dir.join(format!("diverged_epoch{}_batch{}.txt", epoch, batch_idx));
                    let _ = std::fs::write(
                        &dump,
                        format!("epoch {epoch} batch {batch_idx} sequences {:?}\n{msg}\n", chunk),
                    );
                    Error::Numeric(format!("{msg} (batch dump: {})", dump.display()))
                }
                other => other,
            })?;
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
        if std::env::var_os("POSELIFT_TRACE").is_some() {
            eprintln!("epoch {} loss {:.4}", epoch, epoch_losses.last().unwrap());
        }
    }

    let meta = CheckpointMeta {
        backbone: cfg.backbone,
        diffusion_t: cfg.diffusion_t,
        schedule: match cfg.schedule {
            crate::diffusion::ScheduleKind::Linear => "linear".into(),
            crate::diffusion::ScheduleKind::Cosine => "cosine".into(),
        },
        sampling_steps: cfg.sampling_steps,
        coeff_mode: match cfg.coeff_mode {
            crate::diffusion::CoeffMode::Standard => "standard".into(),
            crate::diffusion::CoeffMode::PaperLiteral => "paper_literal".into(),
        },
        pose_scale_mm: cfg.pose_scale_mm,
    };
    let checkpoint_path = out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint_path, &meta, &store)?;

    let loss_log_path = out_dir.join("loss.csv");
    let mut f = std::fs::File::create(&loss_log_path)?;
    writeln!(f, "epoch,loss")?;
    for (e, l) in epoch_losses.iter().enumerate() {
        writeln!(f, "{},{:.9}", e, l)?;
    }

    let config_path = out_dir.join("run_config.txt");
    std::fs::write(&config_path, cfg.to_kv())?;

    Ok(TrainOutput { checkpoint_path, loss_log_path, config_path, epoch_losses })
}

#[allow(clippy::too_many_arguments)]
fn train_batch<T: Scalar>(
    cfg: &RunConfig,
    backbone: &Backbone,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    sched: &DiffusionSchedule,
    data: &Dataset,
    chunk: &[usize],
    epoch: usize,
    batch_idx: usize,
    lr: f64,
) -> Result<f64> {
    let topo = human_topology();
    let rows = cfg.backbone.frames * cfg.backbone.joints;
    let mut xs: Vec<Tensor<T>> = Vec::with_capacity(chunk.len());
    let mut targets: Vec<Tensor<T>> = Vec::with_capacity(chunk.len());
    let mut noisy: Vec<Tensor<T>> = Vec::with_capacity(chunk.len());
    let mut ts: Vec<usize> = Vec::with_capacity(chunk.len());
    for (pos, &si) in chunk.iter().enumerate() {
        let sample_tag = (epoch * data.len() + batch_idx * cfg.batch_size + pos) as u64;
        let (x2, y3) = &data.sequences[si];
        // horizontal-flip augmentation
        let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "flip", sample_tag));
        let (x2, y3) = if flip_rng.random_range(0.0..1.0) < cfg.hflip_prob {
            hflip(x2, y3, &topo)?
        } else {
            (x2.clone(), y3.clone())
        };
        let (x, y0) = to_tensors::<T>(&x2, &y3, cfg.pose_scale_mm)?;
        // uniform step in 1..=T and a fresh noise draw
        let mut t_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "t", sample_tag));
        let t = t_rng.random_range(1..=cfg.diffusion_t);
        let mut eps_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "eps", sample_tag));
        let eps: Vec<T> = (0..rows * 3)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut eps_rng);
                T::from_f64(v)
            })
            .collect();
        let eps = Tensor::new(vec![rows, 3], eps)?;
        let y_t = crate::diffusion::q_sample(&y0, t, &eps, sched)?;
        xs.push(x);
        targets.push(y0);
        noisy.push(y_t);
        ts.push(t);
    }

    let x_refs: Vec<&Tensor<T>> = xs.iter().collect();
    let noisy_refs: Vec<&Tensor<T>> = noisy.iter().collect();
    let input = ForwardInput::assemble(&cfg.backbone, &x_refs, &noisy_refs, &ts)?;
    let dropout_seed = derive_seed(cfg.seed, "dropout", (epoch * 1_000_003 + batch_idx) as u64);
    let mut tape = Tape::new(Mode::Train { dropout_seed });
    let out = backbone.forward_on_tape(&mut tape, store, &input)?;

    // concatenated targets, aligned with the batch rows
    let mut tgt = Vec::with_capacity(chunk.len() * rows * 3);
    for t in &targets {
        tgt.extend_from_slice(t.data());
    }
    let tgt = tape.constant(Tensor::new(vec![chunk.len() * rows, 3], tgt)?);
    let diff = tape.sub(out, tgt)?;
    let loss = tape.row_l2_mean(diff);
    let loss_val = tape.scalar_value(loss).to_f64();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {}", loss_val)));
    }
    tape.backward(loss)?;

    let mut grads: Vec<(ParamId, Vec<T>)> = Vec::new();
    for id in store.ids() {
        if let Some(g) = tape.param_grad(id) {
            grads.push((id, g));
        }
    }
    grads.sort_by_key(|(id, _)| *id);
    opt.apply(store, &grads, lr);
    if !store.all_finite() {
        return Err(Error::Numeric("parameters left the finite domain after an update".into()));
    }
    Ok(loss_val)
}
