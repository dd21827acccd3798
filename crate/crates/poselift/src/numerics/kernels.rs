//! Forward math kernels shared by the plain tensor API and the gradient tape.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Standard matrix product of a `m×k` by a `k×n` tensor.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::Dimension(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    T::gemm(m, k, n, T::ONE, a.data(), b.data(), T::ZERO, out.data_mut());
    Ok(out)
}

/// Softmax along the given axis, computed with max-subtraction so large
/// inputs cannot overflow.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let nd = x.shape().len();
    if axis >= nd {
        return Err(Error::Dimension(format!(
            "softmax axis {} out of range for shape {:?}",
            axis,
            x.shape()
        )));
    }
    // Walk the tensor as outer × axis × inner.
    let axis_len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = data[base];
            for a in 1..axis_len {
                let v = data[base + a * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::ZERO;
            for a in 0..axis_len {
                let idx = base + a * inner;
                let e = (data[idx] - max).exp();
                data[idx] = e;
                sum += e;
            }
            for a in 0..axis_len {
                data[base + a * inner] /= sum;
            }
        }
    }
    Ok(out)
}

/// In-place row softmax over a flat `rows × cols` slice. Hot-path variant
/// used by attention. The exp pass stands alone so it vectorizes.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        for v in row.iter_mut() {
            *v -= max;
        }
        T::exp_slice_inplace(row);
        let mut sum = T::ZERO;
        for &v in row.iter() {
            sum += v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Layer normalization over the last axis with affine gain/bias.
/// Each row is shifted to mean zero and scaled to unit variance (up to
/// `eps`) before the affine transform.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::Dimension("layer_norm needs a non-empty last axis".into()));
    }
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::Dimension(format!(
            "layer_norm affine params must have length {}, got gain {} / bias {}",
            cols,
            gain.numel(),
            bias.numel()
        )));
    }
    let rows = x.rows();
    let mut out = x.clone();
    layer_norm_rows_inplace(out.data_mut(), rows, cols, gain.data(), bias.data(), T::from_f64(eps), None);
    Ok(out)
}

/// In-place layer norm over flat rows; optionally records per-row
/// (mean, inverse std) pairs for the backward pass.
pub fn layer_norm_rows_inplace<T: Scalar>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    mut saved: Option<&mut Vec<(T, T)>>,
) {
    debug_assert_eq!(data.len(), rows * cols);
    let inv_n = T::ONE / T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mean = chunked_sum(row) * inv_n;
        let mut var = [T::ZERO; 8];
        let mut chunks = row.chunks_exact(8);
        for ch in &mut chunks {
            for (l, &v) in ch.iter().enumerate() {
                let d = v - mean;
                var[l] += d * d;
            }
        }
        for &v in chunks.remainder() {
            let d = v - mean;
            var[0] += d * d;
        }
        let var = (var[0] + var[4] + (var[1] + var[5]) + (var[2] + var[6]) + (var[3] + var[7])) * inv_n;
        let rstd = T::ONE / (var + eps).sqrt();
        if let Some(s) = saved.as_deref_mut() {
            s.push((mean, rstd));
        }
        for (v, (&g, &b)) in row.iter_mut().zip(gain.iter().zip(bias.iter())) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
}

/// Lane-partitioned slice sum (order-deterministic).
#[inline]
pub fn chunked_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let mut chunks = xs.chunks_exact(8);
    for ch in &mut chunks {
        for (l, &v) in ch.iter().enumerate() {
            acc[l] += v;
        }
    }
    for &v in chunks.remainder() {
        acc[0] += v;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// GELU activation (tanh approximation, evaluated in its sigmoid form:
/// `0.5 x (1 + tanh(u)) == x * sigmoid(2u)`).
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let two_c = T::from_f64(2.0 * 0.7978845608028654); // 2 sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let g = two_c * (x + k * x * x * x);
    x * sigmoid(g)
}

/// Derivative of `gelu`.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let two_c = T::from_f64(2.0 * 0.7978845608028654);
    let k = T::from_f64(0.044715);
    let three_k = T::from_f64(3.0 * 0.044715);
    let g = two_c * (x + k * x * x * x);
    let s = sigmoid(g);
    s + x * s * (T::ONE - s) * two_c * (T::ONE + three_k * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Multiplies `grad[i] *= gelu'(x[i])`.
pub fn gelu_grad_slice<T: Scalar>(xs: &[T], grad: &mut [T]) {
    T::gelu_grad_slice(xs, grad);
}

/// In-place GELU over a slice.
pub fn gelu_slice_inplace<T: Scalar>(xs: &mut [T]) {
    T::gelu_slice_inplace(xs);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop reference for matmul.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        // Tiny deterministic generator for test fixtures.
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let b = rand_tensor(vec![3, 4], 7);
        let i3 = Tensor::<f64>::eye(3);
        let out = matmul(&i3, &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = rand_tensor(vec![7, 5], 1);
        let b = rand_tensor(vec![5, 3], 2);
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_oracle(&a, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::error::Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (got, want) in s.data().iter().zip(x.data().iter().map(|v| v.exp() / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_fuzz() {
        for seed in 0..1000u64 {
            let x = rand_tensor(vec![4, 6], seed).scale(37.0);
            let s = softmax(&x, 1).unwrap();
            for r in 0..4 {
                let sum: f64 = (0..6).map(|c| s.at2(r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {} off at seed {}", sum, seed);
                for c in 0..6 {
                    let v = s.at2(r, c);
                    assert!(v >= 0.0 && v <= 1.0);
                }
            }
        }
    }

    #[test]
    fn softmax_axis_zero() {
        let x = Tensor::new(vec![2, 2], vec![5.0, 1.0, 5.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        // columns sum to one
        for c in 0..2 {
            let sum = s.at2(0, c) + s.at2(1, c);
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zeroed() {
        let x = Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap();
        let gain = Tensor::full(vec![4], 1.0);
        let bias = Tensor::zeros(vec![4]);
        let out = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_vector_unchanged() {
        // mean 0, variance 1 exactly
        let x = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        let gain = Tensor::full(vec![2], 1.0);
        let bias = Tensor::zeros(vec![2]);
        let out = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = rand_tensor(vec![5, 9], 11);
        let gain = rand_tensor(vec![9], 12);
        let bias = rand_tensor(vec![9], 13);
        let eps = 1e-9;
        let out = layer_norm(&x, &gain, &bias, eps).unwrap();
        for r in 0..5 {
            let row: Vec<f64> = (0..9).map(|c| x.at2(r, c)).collect();
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            for c in 0..9 {
                let want = (row[c] - mean) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
                assert!((out.at2(r, c) - want).abs() < 1e-9);
            }
            // pre-affine statistics: mean 0, variance 1
            let normed: Vec<f64> =
                (0..9).map(|c| (out.at2(r, c) - bias.data()[c]) / gain.data()[c]).collect();
            let m = normed.iter().sum::<f64>() / 9.0;
            let v = normed.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "at {}", x);
        }
    }
}
