//! Forward noising process, DDPM posterior stepping, accelerated DDIM
//! updates, noise reconstruction from x0 predictions, the sampling loop,
//! and the x0-prediction training objective.
//!
//! Coefficients follow the standard DDPM/DDIM identities by default. A
//! paper-literal coefficient mode is selectable for the DDIM weight `w1`
//! and the noise reconstruction, where the printed formulas use the
//! cumulative retention factor unrooted; the two modes are kept side by
//! side so the discrepancy stays testable instead of silently resolved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-step noising tables: `beta[t]`, `alpha[t] = 1 - beta[t]`, and the
/// cumulative product `alpha_bar[t]` for `t = 1..=t_max`, with
/// `alpha_bar[0] = 1` exactly.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{}'", other))),
        }
    }
}

/// Coefficient convention for `ddim_step` / `eps_from_x0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoeffMode {
    /// Standard DDIM identities (square roots of the cumulative factor).
    #[default]
    Standard,
    /// The printed update formulas taken verbatim (cumulative factor
    /// unrooted in `w1` and in the noise reconstruction numerator).
    PaperLiteral,
}

impl std::str::FromStr for CoeffMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CoeffMode::Standard),
            "paper_literal" => Ok(CoeffMode::PaperLiteral),
            other => Err(Error::Config(format!("unknown coeff mode '{}'", other))),
        }
    }
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_max < 1 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let mut beta = vec![0.0f64; t_max + 1];
    match kind {
        ScheduleKind::Linear => {
            let (b0, b1) = (1e-4, 2e-2);
            for (t, b) in beta.iter_mut().enumerate().skip(1) {
                *b = if t_max == 1 { b0 } else { b0 + (b1 - b0) * (t - 1) as f64 / (t_max - 1) as f64 };
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / t_max as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0;
            for t in 1..=t_max {
                let ab = f(t as f64) / f0;
                let b = (1.0 - ab / prev).clamp(1e-12, 0.999);
                beta[t] = b;
                prev *= 1.0 - b;
            }
        }
    }
    let mut alpha = vec![1.0f64; t_max + 1];
    let mut alpha_bar = vec![1.0f64; t_max + 1];
    for t in 1..=t_max {
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let sched = DiffusionSchedule { t_max, beta, alpha, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

impl DiffusionSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::Step(format!("step {} out of range 1..={}", t, self.t_max)));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Numeric("alpha_bar[0] must be exactly 1".into()));
        }
        for t in 1..=self.t_max {
            if !(self.beta[t] > 0.0 && self.beta[t] < 1.0) {
                return Err(Error::Numeric(format!("beta[{}] = {} outside (0, 1)", t, self.beta[t])));
            }
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(Error::Numeric("alpha_bar must be strictly decreasing".into()));
            }
        }
        Ok(())
    }
}

/// Strictly increasing sampling sub-sequence ending at the final step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TauSchedule {
    taus: Vec<usize>,
}

impl TauSchedule {
    pub fn new(taus: Vec<usize>, sched: &DiffusionSchedule) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Config("sampling schedule must not be empty".into()));
        }
        for w in taus.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("sampling steps must be strictly increasing".into()));
            }
        }
        if taus[0] < 1 || *taus.last().unwrap() != sched.t_max() {
            return Err(Error::Config(format!(
                "sampling steps must lie in 1..={} and end at {}",
                sched.t_max(),
                sched.t_max()
            )));
        }
        Ok(TauSchedule { taus })
    }

    /// `steps` evenly spaced values ending at the final step.
    pub fn uniform(steps: usize, sched: &DiffusionSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if steps > sched.t_max() {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the {} diffusion steps",
                steps,
                sched.t_max()
            )));
        }
        let taus: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 / steps as f64) * sched.t_max() as f64).round() as usize)
            .collect();
        // rounding keeps these strictly increasing because steps <= t_max
        Self::new(taus, sched)
    }

    pub fn steps(&self) -> usize {
        self.taus.len()
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }
}

/// Forward marginal: `y_t = sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<T: Scalar>(y0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let c0 = T::from_f64(ab.sqrt());
    let c1 = T::from_f64((1.0 - ab).sqrt());
    y0.zip(eps, |a, e| c0 * a + c1 * e)
}

/// Posterior mean and standard deviation of the reverse step at `t`,
/// expressed in terms of the clean-pose estimate and the current noisy
/// state.
pub fn posterior_mean_std<T: Scalar>(
    y0hat: &Tensor<T>,
    yt: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<(Tensor<T>, T)> {
    sched.check_t(t)?;
    if t == 1 {
        // alpha_bar_0 = 1 collapses the coefficients to (1, 0) and the
        // variance to zero; evaluate the identity exactly rather than
        // through the cancellation-prone quotient.
        if y0hat.shape() != yt.shape() {
            return Err(Error::Dimension("posterior inputs must share a shape".into()));
        }
        return Ok((y0hat.clone(), T::ZERO));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let c0 = T::from_f64(ab_prev.sqrt() * beta / (1.0 - ab_t));
    let c1 = T::from_f64(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t));
    let mu = y0hat.zip(yt, |a, b| c0 * a + c1 * b)?;
    let sigma = T::from_f64((beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt());
    Ok((mu, sigma))
}

/// One ancestral reverse step: `y_{t-1} = mu_t + sigma_t z`, `z` forced to
/// zero at the deterministic last step.
pub fn ddpm_step<T: Scalar>(
    y0hat: &Tensor<T>,
    yt: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    let (mu, sigma) = posterior_mean_std(y0hat, yt, t, sched)?;
    if t == 1 {
        return Ok(mu);
    }
    mu.zip(z, |m, zz| m + sigma * zz)
}

/// Deterministic DDIM update from `tau_i` down to `tau_prev`
/// (`tau_prev = 0` collapses to the clean estimate).
pub fn ddim_step<T: Scalar>(
    y0hat: &Tensor<T>,
    yt: &Tensor<T>,
    tau_i: usize,
    tau_prev: usize,
    sched: &DiffusionSchedule,
    mode: CoeffMode,
) -> Result<Tensor<T>> {
    sched.check_t(tau_i)?;
    if tau_prev >= tau_i {
        return Err(Error::Step(format!("tau_prev {} must be below tau_i {}", tau_prev, tau_i)));
    }
    let ab_i = sched.alpha_bar(tau_i);
    let ab_prev = sched.alpha_bar(tau_prev);
    let w2 = ((1.0 - ab_prev) / (1.0 - ab_i)).sqrt();
    let w1 = match mode {
        CoeffMode::Standard => ab_prev.sqrt() - ab_i.sqrt() * w2,
        CoeffMode::PaperLiteral => ab_prev - ab_i * w2,
    };
    let (w1, w2) = (T::from_f64(w1), T::from_f64(w2));
    y0hat.zip(yt, |a, b| w1 * a + w2 * b)
}

/// Reconstructs the Gaussian noise implied by a clean-pose prediction.
pub fn eps_from_x0<T: Scalar>(
    yt: &Tensor<T>,
    y0hat: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
    mode: CoeffMode,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let num = match mode {
        CoeffMode::Standard => ab.sqrt(),
        CoeffMode::PaperLiteral => ab,
    };
    let c0 = T::from_f64(num);
    let c1 = T::from_f64(1.0 / (1.0 - ab).sqrt());
    yt.zip(y0hat, |a, b| (a - c0 * b) * c1)
}

/// A model that predicts the clean pose from 2D conditions, the noisy pose
/// at step `t`, and `t` itself.
pub trait Denoiser<T: Scalar> {
    fn denoise(&self, x2d: &Tensor<T>, y_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> Denoiser<T> for F
where
    F: Fn(&Tensor<T>, &Tensor<T>, usize) -> Result<Tensor<T>>,
{
    fn denoise(&self, x2d: &Tensor<T>, y_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(x2d, y_t, t)
    }
}

/// Draws the seeded Gaussian initialization used by `sample`.
pub fn sample_init<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(v)
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Runs the accelerated reverse process: a seeded unit-Gaussian pose is
/// refined through the sampling sub-sequence in descending order; the final
/// clean estimate is returned. Deterministic given the seed.
pub fn sample<T: Scalar>(
    model: &dyn Denoiser<T>,
    x2d: &Tensor<T>,
    tau: &TauSchedule,
    seed: u64,
    sched: &DiffusionSchedule,
    mode: CoeffMode,
) -> Result<Tensor<T>> {
    let rows = x2d.rows();
    let mut y = sample_init::<T>(rows, 3, seed);
    for i in (0..tau.steps()).rev() {
        let t = tau.taus()[i];
        let y0hat = model.denoise(x2d, &y, t)?;
        if y0hat.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "denoiser returned {:?}, expected {:?}",
                y0hat.shape(),
                y.shape()
            )));
        }
        let tau_prev = if i == 0 { 0 } else { tau.taus()[i - 1] };
        y = ddim_step(&y0hat, &y, t, tau_prev, sched, mode)?;
    }
    if !y.all_finite() {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(y)
}

/// One training batch: paired 2D conditions and clean target poses, with a
/// sampled step and noise draw per sample.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Scalar> {
    pub x2d: Vec<Tensor<T>>,
    pub y0: Vec<Tensor<T>>,
    pub t: Vec<usize>,
    pub eps: Vec<Tensor<T>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        let n = self.x2d.len();
        if self.y0.len() != n || self.t.len() != n || self.eps.len() != n {
            return Err(Error::Dimension("train batch fields must have equal lengths".into()));
        }
        if n == 0 {
            return Err(Error::Config("train batch is empty".into()));
        }
        for i in 0..n {
            if self.eps[i].shape() != self.y0[i].shape() {
                return Err(Error::Dimension("noise shape must equal target shape".into()));
            }
            sched.check_t(self.t[i])?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x2d.is_empty()
    }
}

/// x0-prediction objective: noise each target to its sampled step, ask the
/// model for the clean pose, and average the per-joint Euclidean distance
/// to the target over all samples, frames, and joints.
pub fn training_loss<T: Scalar>(
    model: &dyn Denoiser<T>,
    batch: &TrainBatch<T>,
    sched: &DiffusionSchedule,
) -> Result<T> {
    batch.validate(sched)?;
    let mut total = T::ZERO;
    let mut count = 0usize;
    for i in 0..batch.len() {
        let y_t = q_sample(&batch.y0[i], batch.t[i], &batch.eps[i], sched)?;
        let y0hat = model.denoise(&batch.x2d[i], &y_t, batch.t[i])?;
        if y0hat.shape() != batch.y0[i].shape() {
            return Err(Error::Dimension("denoiser output shape mismatch".into()));
        }
        let rows = y0hat.rows();
        let cols = y0hat.cols();
        for r in 0..rows {
            let mut s = T::ZERO;
            for c in 0..cols {
                let d = y0hat.data()[r * cols + c] - batch.y0[i].data()[r * cols + c];
                s += d * d;
            }
            total += s.sqrt();
            count += 1;
        }
    }
    Ok(total / T::from_f64(count as f64))
}
