use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of tensors. 64-bit floats are the default throughout the
/// crate; `f32` is an opt-in speed mode for training/inference runs and is
/// excluded from the gradient-check paths.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn is_finite(self) -> bool;

    fn max_val(self, other: Self) -> Self;
    fn min_val(self, other: Self) -> Self;

    /// Row-major matrix multiply-accumulate: `c = alpha * a·b + beta * c`
    /// with `a: m×k`, `b: k×n`, `c: m×n`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Exponentiates a slice in place. The speed-mode implementation is
    /// lane-parallel.
    fn exp_slice_inplace(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }

    /// In-place GELU over a slice (single pass).
    fn gelu_slice_inplace(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = crate::numerics::kernels::gelu(*x);
        }
    }

    /// `grad[i] *= gelu'(x[i])` (single pass).
    fn gelu_grad_slice(xs: &[Self], grad: &mut [Self]) {
        for (g, &x) in grad.iter_mut().zip(xs) {
            *g *= crate::numerics::kernels::gelu_grad(x);
        }
    }

    /// `out[i] += g[i] * gelu'(x[i])` without temporaries.
    fn gelu_grad_acc(xs: &[Self], g: &[Self], out: &mut [Self]) {
        for ((o, &gv), &x) in out.iter_mut().zip(g).zip(xs) {
            *o += gv * crate::numerics::kernels::gelu_grad(x);
        }
    }
}

/// Eight-lane polynomial exp used by the f32 slice path; each step is a
/// fixed-width array op the compiler turns into vector instructions.
#[inline(always)]
fn exp8(v: [f32; 8]) -> [f32; 8] {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375;
    const C2: f32 = -2.121_944_4e-4;
    let mut x = v;
    for l in 0..8 {
        x[l] = x[l].max(-87.0).min(88.0);
    }
    let mut n = [0f32; 8];
    for l in 0..8 {
        n[l] = (x[l] * LOG2E).round();
    }
    let mut r = [0f32; 8];
    for l in 0..8 {
        r[l] = (x[l] - n[l] * C1) - n[l] * C2;
    }
    let mut p = [1.987_569_15e-4f32; 8];
    for (c0, c1) in [
        (1.398_199_95e-3f32, 0.0f32),
        (8.333_451_9e-3, 0.0),
        (4.166_579_6e-2, 0.0),
        (1.666_666_55e-1, 0.0),
        (5.000_000_1e-1, 0.0),
    ] {
        let _ = c1;
        for l in 0..8 {
            p[l] = p[l] * r[l] + c0;
        }
    }
    let mut out = [0f32; 8];
    for l in 0..8 {
        out[l] = p[l] * r[l] * r[l] + r[l] + 1.0;
    }
    for l in 0..8 {
        // n is in [-126, 127] after the clamp, so the unchecked conversion
        // is in range and compiles to a vector convert
        let ni = unsafe { n[l].to_int_unchecked::<i32>() };
        let bits = ((ni + 127) << 23) as u32;
        out[l] *= f32::from_bits(bits);
    }
    out
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline(always)]
    fn max_val(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn min_val(self, other: Self) -> Self {
        f64::min(self, other)
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    /// Polynomial exp for the speed mode: branch-free, vectorizable,
    /// relative error under 4e-6 (cephes-style coefficients).
    #[inline(always)]
    fn exp(self) -> Self {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const C1: f32 = 0.693_359_375;
        const C2: f32 = -2.121_944_4e-4;
        let x = self.clamp(-87.0, 88.0);
        let n = (x * LOG2E).round();
        let r = (x - n * C1) - n * C2;
        let mut p = 1.987_569_15e-4f32;
        p = p * r + 1.398_199_95e-3;
        p = p * r + 8.333_451_9e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_55e-1;
        p = p * r + 5.000_000_1e-1;
        let p = p * r * r + r + 1.0;
        let bits = ((n as i32 + 127) << 23) as u32;
        p * f32::from_bits(bits)
    }

    fn exp_slice_inplace(xs: &mut [Self]) {
        let mut chunks = xs.chunks_exact_mut(8);
        for ch in &mut chunks {
            let mut a = [0f32; 8];
            a.copy_from_slice(ch);
            ch.copy_from_slice(&exp8(a));
        }
        for x in chunks.into_remainder() {
            *x = Scalar::exp(*x);
        }
    }

    fn gelu_slice_inplace(xs: &mut [Self]) {
        const TWO_C: f32 = 2.0 * 0.797_884_55;
        const K: f32 = 0.044_715;
        let mut chunks = xs.chunks_exact_mut(8);
        for ch in &mut chunks {
            let mut a = [0f32; 8];
            a.copy_from_slice(ch);
            let mut u = [0f32; 8];
            for l in 0..8 {
                u[l] = -(TWO_C * (a[l] + K * a[l] * a[l] * a[l]));
            }
            let e = exp8(u);
            for l in 0..8 {
                a[l] /= 1.0 + e[l];
            }
            ch.copy_from_slice(&a);
        }
        for x in chunks.into_remainder() {
            *x = crate::numerics::kernels::gelu(*x);
        }
    }

    fn gelu_grad_slice(xs: &[Self], grad: &mut [Self]) {
        const TWO_C: f32 = 2.0 * 0.797_884_55;
        const K: f32 = 0.044_715;
        const THREE_K: f32 = 3.0 * 0.044_715;
        let mut gchunks = grad.chunks_exact_mut(8);
        let mut xchunks = xs.chunks_exact(8);
        loop {
            let (Some(gc), Some(xc)) = (gchunks.next(), xchunks.next()) else { break };
            let mut x = [0f32; 8];
            x.copy_from_slice(xc);
            let mut u = [0f32; 8];
            for l in 0..8 {
                u[l] = -(TWO_C * (x[l] + K * x[l] * x[l] * x[l]));
            }
            let e = exp8(u);
            for l in 0..8 {
                let s = 1.0 / (1.0 + e[l]);
                gc[l] *= s + x[l] * s * (1.0 - s) * TWO_C * (1.0 + THREE_K * x[l] * x[l]);
            }
        }
        for (g, &x) in gchunks.into_remainder().iter_mut().zip(xchunks.remainder()) {
            *g *= crate::numerics::kernels::gelu_grad(x);
        }
    }

    fn gelu_grad_acc(xs: &[Self], g: &[Self], out: &mut [Self]) {
        const TWO_C: f32 = 2.0 * 0.797_884_55;
        const K: f32 = 0.044_715;
        const THREE_K: f32 = 3.0 * 0.044_715;
        let mut ochunks = out.chunks_exact_mut(8);
        let mut gchunks = g.chunks_exact(8);
        let mut xchunks = xs.chunks_exact(8);
        loop {
            let (Some(oc), Some(gc), Some(xc)) = (ochunks.next(), gchunks.next(), xchunks.next()) else { break };
            let mut x = [0f32; 8];
            x.copy_from_slice(xc);
            let mut u = [0f32; 8];
            for l in 0..8 {
                u[l] = -(TWO_C * (x[l] + K * x[l] * x[l] * x[l]));
            }
            let e = exp8(u);
            for l in 0..8 {
                let s = 1.0 / (1.0 + e[l]);
                oc[l] += gc[l] * (s + x[l] * s * (1.0 - s) * TWO_C * (1.0 + THREE_K * x[l] * x[l]));
            }
        }
        for ((o, &gv), &x) in ochunks
            .into_remainder()
            .iter_mut()
            .zip(gchunks.remainder())
            .zip(xchunks.remainder())
        {
            *o += gv * crate::numerics::kernels::gelu_grad(x);
        }
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f32::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f32::cos(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline(always)]
    fn max_val(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn min_val(self, other: Self) -> Self {
        f32::min(self, other)
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
