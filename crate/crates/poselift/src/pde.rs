//! Over-smoothing control: feature aggregation viewed as the explicit-Euler
//! discretization of `dy/dtau = (A(y) - I) y`, with the attention matrix
//! playing the role of `A`. Small step sizes slow the collapse of token
//! features toward uniformity that plain aggregation (`h = 1`) exhibits.

use serde::{Deserialize, Serialize};

use crate::dualstream::ops::{mhsa, MhsaWeights};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Discretization settings of the attention PDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    /// Euler step size, in (0, 1].
    pub step_size: f64,
    /// Euler steps per attention layer.
    pub steps: usize,
    pub enabled: bool,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig { step_size: 0.5, steps: 1, enabled: true }
    }
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config(format!("pde step size {} outside (0, 1]", self.step_size)));
        }
        if self.steps < 1 {
            return Err(Error::Config("pde needs at least one step per layer".into()));
        }
        Ok(())
    }
}

const ROW_SUM_TOL: f64 = 1e-9;

fn check_row_stochastic<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    if !a.is_matrix() || a.shape()[0] != a.shape()[1] {
        return Err(Error::Dimension(format!("aggregation matrix must be square, got {:?}", a.shape())));
    }
    let n = a.shape()[0];
    for i in 0..n {
        let sum: f64 = (0..n).map(|j| a.at2(i, j).to_f64()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Contract(format!("row {} of the aggregation matrix sums to {}", i, sum)));
        }
    }
    Ok(n)
}

/// One explicit-Euler step: `y + h (a y - y) = ((1-h) I + h a) y` for a
/// row-stochastic aggregation matrix.
pub fn pde_step<T: Scalar>(y: &Tensor<T>, a: &Tensor<T>, h: f64) -> Result<Tensor<T>> {
    let n = check_row_stochastic(a)?;
    if y.rows() != n {
        return Err(Error::Dimension(format!(
            "state has {} rows, aggregation matrix is {}x{}",
            y.rows(),
            n,
            n
        )));
    }
    let ay = crate::numerics::kernels::matmul(a, y)?;
    let hh = T::from_f64(h);
    y.zip(&ay, |yv, av| yv + hh * (av - yv))
}

/// Integrates `dy/dtau = (A(y) - I) y` from 0 to `t_end` with explicit
/// Euler; `a_fn` is re-evaluated from the current state every step.
pub fn pde_integrate<T: Scalar>(
    y0: &Tensor<T>,
    mut a_fn: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    t_end: f64,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps < 1 {
        return Err(Error::Config("pde integration needs at least one step".into()));
    }
    if !(t_end >= 0.0) {
        return Err(Error::Config(format!("integration horizon {} must be non-negative", t_end)));
    }
    let h = t_end / steps as f64;
    let mut y = y0.clone();
    for _ in 0..steps {
        let a = a_fn(&y)?;
        y = pde_step(&y, &a, h)?;
    }
    Ok(y)
}

/// Attention layer with optional PDE discretization.
///
/// Disabled, this is the standard residual attention update
/// `tokens + mhsa(tokens)`. Enabled, the residual update is replaced by
/// `steps` Euler steps `y <- y + h (mhsa(y) - y)`, the attention matrix
/// being recomputed from the current state each step.
pub fn pde_attention_layer<T: Scalar>(
    tokens: &Tensor<T>,
    weights: &MhsaWeights<T>,
    heads: usize,
    cfg: &PdeConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let len = tokens.rows();
    if !cfg.enabled {
        let upd = mhsa(tokens, weights, 1, len, heads)?;
        return tokens.add(&upd);
    }
    let h = T::from_f64(cfg.step_size);
    let mut y = tokens.clone();
    for _ in 0..cfg.steps {
        let upd = mhsa(&y, weights, 1, len, heads)?;
        y = y.zip(&upd, |yv, uv| yv + h * (uv - yv))?;
    }
    Ok(y)
}

/// Variance of token features across rows, averaged over channels. The
/// quantity the smoothing analysis tracks.
pub fn token_variance<T: Scalar>(y: &Tensor<T>) -> f64 {
    let rows = y.rows();
    let cols = y.cols();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..cols {
        let mean: f64 = (0..rows).map(|r| y.at2(r, c).to_f64()).sum::<f64>() / rows as f64;
        let var: f64 = (0..rows).map(|r| (y.at2(r, c).to_f64() - mean).powi(2)).sum::<f64>() / rows as f64;
        total += var;
    }
    total / cols as f64
}

/// Lazy-walk aggregation matrix `(I + D^{-1} adj) / 2` of an undirected
/// graph; row-stochastic with non-negative real spectrum.
pub fn lazy_walk_matrix(adjacency: &Tensor<f64>) -> Result<Tensor<f64>> {
    if !adjacency.is_matrix() || adjacency.shape()[0] != adjacency.shape()[1] {
        return Err(Error::Dimension("adjacency must be square".into()));
    }
    let n = adjacency.shape()[0];
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| adjacency.at2(i, j)).sum();
        if deg <= 0.0 {
            return Err(Error::Contract(format!("node {} has no neighbors", i)));
        }
        for j in 0..n {
            let w = 0.5 * adjacency.at2(i, j) / deg + if i == j { 0.5 } else { 0.0 };
            out.set2(i, j, w);
        }
    }
    Ok(out)
}

/// Path-graph adjacency on `n` nodes.
pub fn path_graph(n: usize) -> Tensor<f64> {
    let mut a = Tensor::zeros(vec![n, n]);
    for i in 0..n.saturating_sub(1) {
        a.set2(i, i + 1, 1.0);
        a.set2(i + 1, i, 1.0);
    }
    a
}

/// Truncated matrix-exponential series `sum_k ((a - I) t)^k / k! . y0`,
/// the reference solution for constant aggregation matrices.
pub fn matrix_exp_reference(a: &Tensor<f64>, y0: &Tensor<f64>, t: f64, terms: usize) -> Result<Tensor<f64>> {
    let n = a.shape()[0];
    if a.shape() != [n, n] || y0.rows() != n {
        return Err(Error::Dimension("matrix exponential shape mismatch".into()));
    }
    // b = (a - I) * t
    let mut b = a.scale(t);
    for i in 0..n {
        let v = b.at2(i, i) - t;
        b.set2(i, i, v);
    }
    let mut acc = y0.clone();
    let mut term = y0.clone();
    for k in 1..=terms {
        term = crate::numerics::kernels::matmul(&b, &term)?.scale(1.0 / k as f64);
        acc = acc.add(&term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random symmetric row-stochastic (hence doubly stochastic) matrix via
    /// Metropolis weights on a random connected graph.
    fn metropolis_matrix(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adj = vec![vec![false; n]; n];
        for i in 1..n {
            // random spanning tree keeps the graph connected
            let p = rng.random_range(0..i);
            adj[i][p] = true;
            adj[p][i] = true;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_range(0.0..1.0) < 0.3 {
                    adj[i][j] = true;
                    adj[j][i] = true;
                }
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| adj[i].iter().filter(|&&b| b).count() as f64).collect();
        let mut m = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i != j && adj[i][j] {
                    let w = 1.0 / deg[i].max(deg[j]);
                    m.set2(i, j, w);
                    off += w;
                }
            }
            m.set2(i, i, 1.0 - off);
        }
        m
    }

    #[test]
    fn identity_matrix_is_a_fixed_point_for_any_h() {
        let y = rand_tensor(vec![4, 3], 1);
        for h in [0.1, 0.5, 1.0] {
            let out = pde_step(&y, &Tensor::eye(4), h).unwrap();
            assert!(out.max_abs_diff(&y) < 1e-15, "h = {}", h);
        }
    }

    #[test]
    fn full_step_is_plain_aggregation() {
        let y = rand_tensor(vec![5, 2], 2);
        let a = lazy_walk_matrix(&path_graph(5)).unwrap();
        let out = pde_step(&y, &a, 1.0).unwrap();
        let want = crate::numerics::kernels::matmul(&a, &y).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn step_matches_algebraic_form() {
        let y = rand_tensor(vec![6, 4], 3);
        let a = metropolis_matrix(6, 4);
        let h = 0.37;
        let out = pde_step(&y, &a, h).unwrap();
        // ((1-h) I + h a) y
        let mut m = a.scale(h);
        for i in 0..6 {
            let v = m.at2(i, i) + (1.0 - h);
            m.set2(i, i, v);
        }
        let want = crate::numerics::kernels::matmul(&m, &y).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn non_row_stochastic_matrix_is_a_contract_error() {
        let y = rand_tensor(vec![3, 2], 5);
        let mut a = Tensor::eye(3);
        a.set2(0, 1, 0.5);
        assert!(matches!(pde_step(&y, &a, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let y0 = rand_tensor(vec![4, 2], 6);
        let a = metropolis_matrix(4, 7);
        let out = pde_integrate(&y0, |_| Ok(a.clone()), 0.0, 10).unwrap();
        assert!(out.max_abs_diff(&y0) < 1e-15);
    }

    #[test]
    fn integrator_tracks_matrix_exponential() {
        let a = lazy_walk_matrix(&path_graph(5)).unwrap();
        let y0 = rand_tensor(vec![5, 3], 8);
        let want = matrix_exp_reference(&a, &y0, 1.0, 20).unwrap();
        let coarse = pde_integrate(&y0, |_| Ok(a.clone()), 1.0, 1000).unwrap();
        let err_coarse = coarse.max_abs_diff(&want);
        assert!(err_coarse < 1e-3, "error {}", err_coarse);
        // first-order convergence: doubling the steps roughly halves the error
        let fine = pde_integrate(&y0, |_| Ok(a.clone()), 1.0, 2000).unwrap();
        let err_fine = fine.max_abs_diff(&want);
        let ratio = err_coarse / err_fine;
        assert!(ratio > 1.6 && ratio < 2.4, "convergence ratio {}", ratio);
    }

    #[test]
    fn state_dependent_matrix_is_reevaluated() {
        // a(y) flips between two permutations depending on the sign of a
        // feature, so a correct integrator must call a_fn every step
        let y0 = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let swap = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let id = Tensor::<f64>::eye(2);
        let mut calls = 0;
        let out = pde_integrate(
            &y0,
            |y| {
                calls += 1;
                Ok(if y.data()[0] > 0.5 { swap.clone() } else { id.clone() })
            },
            1.0,
            4,
        )
        .unwrap();
        assert_eq!(calls, 4);
        assert!(out.all_finite());
    }

    #[test]
    fn smoothing_monotonicity_under_symmetric_aggregation() {
        // feature variance across tokens never increases under pde_step for
        // symmetric row-stochastic aggregation
        for seed in 0..100 {
            let n = 3 + (seed as usize % 6);
            let a = metropolis_matrix(n, 1000 + seed);
            let y = rand_tensor(vec![n, 3], 2000 + seed);
            let mut prev = token_variance(&y);
            let mut cur = y;
            for step in 0..5 {
                let h = 0.2 + 0.2 * ((seed + step) % 5) as f64;
                cur = pde_step(&cur, &a, h.min(1.0)).unwrap();
                let v = token_variance(&cur);
                assert!(v <= prev + 1e-12, "variance rose {} -> {} at seed {}", prev, v, seed);
                prev = v;
            }
        }
    }

    #[test]
    fn identical_rows_are_fixed_points() {
        let row = rand_tensor(vec![1, 4], 9);
        let mut y = Tensor::zeros(vec![5, 4]);
        for r in 0..5 {
            for c in 0..4 {
                y.set2(r, c, row.data()[c]);
            }
        }
        let a = metropolis_matrix(5, 10);
        let out = pde_step(&y, &a, 0.7).unwrap();
        assert!(out.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn half_steps_decelerate_variance_decay() {
        // after n steps, variance with h = 0.5 stays above variance with
        // h = 1 for the PSD-shifted lazy-walk matrix
        for seed in 0..100 {
            let a = lazy_walk_matrix(&path_graph(6)).unwrap();
            let y0 = rand_tensor(vec![6, 4], 3000 + seed);
            let mut slow = y0.clone();
            let mut fast = y0.clone();
            for _ in 0..10 {
                slow = pde_step(&slow, &a, 0.5).unwrap();
                fast = pde_step(&fast, &a, 1.0).unwrap();
            }
            let vs = token_variance(&slow);
            let vf = token_variance(&fast);
            assert!(vs > vf, "seed {}: slow {} vs fast {}", seed, vs, vf);
        }
    }

    #[test]
    fn attention_layer_vanishing_step_returns_input() {
        let d = 4;
        let mut w = MhsaWeights::<f64>::zeros(d);
        w.wq = rand_tensor(vec![d, d], 11);
        w.wk = rand_tensor(vec![d, d], 12);
        w.wv = rand_tensor(vec![d, d], 13);
        w.wo = rand_tensor(vec![d, d], 14);
        let tokens = rand_tensor(vec![5, d], 15);
        let cfg = PdeConfig { step_size: 1e-8, steps: 1, enabled: true };
        let out = pde_attention_layer(&tokens, &w, 2, &cfg).unwrap();
        assert!(out.max_abs_diff(&tokens) < 1e-6);
    }

    #[test]
    fn attention_layer_disabled_is_residual_mhsa() {
        let d = 6;
        let mut w = MhsaWeights::<f64>::zeros(d);
        w.wq = rand_tensor(vec![d, d], 16);
        w.wk = rand_tensor(vec![d, d], 17);
        w.wv = rand_tensor(vec![d, d], 18);
        w.wo = rand_tensor(vec![d, d], 19);
        w.bo = rand_tensor(vec![d], 20);
        let tokens = rand_tensor(vec![4, d], 21);
        let cfg = PdeConfig { enabled: false, ..Default::default() };
        let out = pde_attention_layer(&tokens, &w, 3, &cfg).unwrap();
        let want = tokens.add(&mhsa(&tokens, &w, 1, 4, 3).unwrap()).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn invalid_pde_config_rejected() {
        let bad = PdeConfig { step_size: 0.0, steps: 1, enabled: true };
        assert!(bad.validate().is_err());
        let bad = PdeConfig { step_size: 1.5, steps: 1, enabled: true };
        assert!(bad.validate().is_err());
        let bad = PdeConfig { step_size: 0.5, steps: 0, enabled: true };
        assert!(bad.validate().is_err());
    }
}
