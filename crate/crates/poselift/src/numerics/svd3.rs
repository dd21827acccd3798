//! 3x3 singular value decomposition by one-sided Jacobi rotations.
//!
//! Only the 3x3 case is needed (Procrustes alignment of point clouds), so a
//! fixed-size Jacobi sweep is used instead of a general-purpose package:
//! columns of the working matrix are orthogonalized pairwise until the
//! off-diagonal Gram entries vanish, at which point the column norms are the
//! singular values.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAX_SWEEPS: usize = 30;
const CONVERGENCE: f64 = 1e-12;

/// Decomposes `m` (3x3) into `(u, s, v)` with `m = u * diag(s) * v^T`,
/// `s` non-negative and descending, `u`/`v` orthogonal.
pub fn svd3(m: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    if m.shape() != [3, 3] {
        return Err(Error::Dimension(format!("svd3 needs a 3x3 matrix, got {:?}", m.shape())));
    }
    if !m.all_finite() {
        return Err(Error::Numeric("svd3 input must be finite".into()));
    }

    // b holds the working columns; v accumulates the right rotations.
    let mut b = [[0.0f64; 3]; 3]; // b[r][c]
    for r in 0..3 {
        for c in 0..3 {
            b[r][c] = m.at2(r, c);
        }
    }
    let mut v = [[0.0f64; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    let col_dot = |b: &[[f64; 3]; 3], i: usize, j: usize| -> f64 {
        (0..3).map(|r| b[r][i] * b[r][j]).sum()
    };

    for _ in 0..MAX_SWEEPS {
        let mut worst = 0.0f64;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let app = col_dot(&b, p, p);
            let aqq = col_dot(&b, q, q);
            let apq = col_dot(&b, p, q);
            let denom = (app * aqq).sqrt();
            if denom > 0.0 {
                worst = worst.max(apq.abs() / denom);
            }
            if apq.abs() <= CONVERGENCE * denom || apq == 0.0 {
                continue;
            }
            let tau = (aqq - app) / (2.0 * apq);
            let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for r in 0..3 {
                let bp = b[r][p];
                let bq = b[r][q];
                b[r][p] = c * bp - s * bq;
                b[r][q] = s * bp + c * bq;
                let vp = v[r][p];
                let vq = v[r][q];
                v[r][p] = c * vp - s * vq;
                v[r][q] = s * vp + c * vq;
            }
        }
        if worst < CONVERGENCE {
            break;
        }
    }

    // Singular values are the column norms; sort descending.
    let mut norms = [0.0f64; 3];
    for (c, n) in norms.iter_mut().enumerate() {
        *n = col_dot(&b, c, c).sqrt();
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let max_norm = norms[order[0]];
    let rank_tol = max_norm * 1e-13;

    let mut u_cols: Vec<[f64; 3]> = Vec::with_capacity(3);
    let mut s_sorted = [0.0f64; 3];
    for (k, &c) in order.iter().enumerate() {
        s_sorted[k] = norms[c];
        if norms[c] > rank_tol && norms[c] > 0.0 {
            let inv = 1.0 / norms[c];
            u_cols.push([b[0][c] * inv, b[1][c] * inv, b[2][c] * inv]);
        } else {
            // Rank-deficient direction: complete an orthonormal basis.
            u_cols.push(orthonormal_completion(&u_cols));
        }
    }

    let mut u = Tensor::zeros(vec![3, 3]);
    let mut vt_sorted = Tensor::zeros(vec![3, 3]);
    for k in 0..3 {
        for r in 0..3 {
            u.set2(r, k, u_cols[k][r]);
            vt_sorted.set2(r, k, v[r][order[k]]);
        }
    }
    let s = Tensor::new(vec![3], s_sorted.to_vec())?;
    Ok((u, s, vt_sorted))
}

/// Returns a unit vector orthogonal to all columns collected so far.
fn orthonormal_completion(cols: &[[f64; 3]]) -> [f64; 3] {
    if cols.len() == 2 {
        let c = cross(&cols[0], &cols[1]);
        let n = norm(&c);
        if n > 1e-300 {
            return [c[0] / n, c[1] / n, c[2] / n];
        }
    }
    // Gram-Schmidt a coordinate axis against the existing columns, picking
    // the axis least aligned with them.
    let mut best = [1.0, 0.0, 0.0];
    let mut best_res = -1.0f64;
    for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
        let mut r = axis;
        for c in cols {
            let d = dot(&r, c);
            for i in 0..3 {
                r[i] -= d * c[i];
            }
        }
        let n = norm(&r);
        if n > best_res {
            best_res = n;
            best = r;
        }
    }
    let n = norm(&best);
    [best[0] / n, best[1] / n, best[2] / n]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// 3x3 determinant, used for the reflection correction in Procrustes.
pub fn det3(m: &Tensor<f64>) -> f64 {
    let a = |r: usize, c: usize| m.at2(r, c);
    a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
        - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
}
