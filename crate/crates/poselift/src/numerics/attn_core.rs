//! Attention inner loops, monomorphized over the head width so the dot and
//! fma kernels compile to fixed-width vector code. The dynamic fallback
//! covers unusual head dims.

use crate::numerics::kernels;
use crate::numerics::Scalar;

#[inline(always)]
fn dot_n<T: Scalar, const N: usize>(a: &[T], b: &[T]) -> T {
    let a: &[T; N] = a[..N].try_into().unwrap();
    let b: &[T; N] = b[..N].try_into().unwrap();
    let mut prod = [T::ZERO; N];
    for l in 0..N {
        prod[l] = a[l] * b[l];
    }
    // pairwise reduction keeps the dependency chain logarithmic
    let mut width = N / 2;
    while width > 0 {
        for l in 0..width {
            let v = prod[l] + prod[l + width];
            prod[l] = v;
        }
        width /= 2;
    }
    prod[0]
}

#[inline(always)]
fn fma_n<T: Scalar, const N: usize>(acc: &mut [T], src: &[T], w: T) {
    let acc: &mut [T; N] = (&mut acc[..N]).try_into().unwrap();
    let src: &[T; N] = src[..N].try_into().unwrap();
    for l in 0..N {
        acc[l] += w * src[l];
    }
}

#[inline(always)]
fn dot_dyn<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline(always)]
fn fma_dyn<T: Scalar>(acc: &mut [T], src: &[T], w: T) {
    for (o, &s) in acc.iter_mut().zip(src) {
        *o += w * s;
    }
}

macro_rules! attn_impls {
    ($fwd:ident, $bwd:ident, $dot:ident, $fma:ident, $make_acc:expr $(, const $dh:ident: usize)?) => {
        #[allow(clippy::too_many_arguments)]
        pub fn $fwd<T: Scalar $(, const $dh: usize)?>(
            qv: &[T],
            kv: &[T],
            vv: &[T],
            out: &mut [T],
            saved_attn: &mut [T],
            groups: usize,
            len: usize,
            heads: usize,
            dh: usize,
            d: usize,
            scale: T,
        ) {
            $( debug_assert_eq!(dh, $dh); )?
            for g in 0..groups {
                let row0 = g * len;
                let attn_base = g * heads * len * len;
                for l1 in 0..len {
                    let qrow = &qv[(row0 + l1) * d..(row0 + l1) * d + d];
                    for l2 in 0..len {
                        let krow = &kv[(row0 + l2) * d..(row0 + l2) * d + d];
                        for h in 0..heads {
                            let base = h * dh;
                            let s = $dot$(::<T, $dh>)?(&qrow[base..base + dh], &krow[base..base + dh]);
                            saved_attn[attn_base + h * len * len + l1 * len + l2] = s * scale;
                        }
                    }
                }
                kernels::softmax_rows_inplace(
                    &mut saved_attn[attn_base..attn_base + heads * len * len],
                    heads * len,
                    len,
                );
                for l1 in 0..len {
                    let orow = &mut out[(row0 + l1) * d..(row0 + l1) * d + d];
                    for h in 0..heads {
                        let base = h * dh;
                        let arow = &saved_attn[attn_base + h * len * len + l1 * len..attn_base + h * len * len + (l1 + 1) * len];
                        let mut local = $make_acc(dh);
                        for (l2, &w) in arow.iter().enumerate() {
                            let vrow = &vv[(row0 + l2) * d + base..(row0 + l2) * d + base + dh];
                            $fma$(::<T, $dh>)?(&mut local[..dh], vrow, w);
                        }
                        for (o, &a) in orow[base..base + dh].iter_mut().zip(&local[..dh]) {
                            *o = a;
                        }
                    }
                }
            }
        }

        #[allow(clippy::too_many_arguments)]
        pub fn $bwd<T: Scalar $(, const $dh: usize)?>(
            qd: &[T],
            kd: &[T],
            vd: &[T],
            g: &[T],
            saved_attn: &[T],
            dq: &mut [T],
            dk: &mut [T],
            dv: &mut [T],
            d_scores: &mut [T],
            needs_q: bool,
            needs_k: bool,
            needs_v: bool,
            groups: usize,
            len: usize,
            heads: usize,
            dh: usize,
            d: usize,
            scale: T,
        ) {
            $( debug_assert_eq!(dh, $dh); )?
            for gi in 0..groups {
                let row0 = gi * len;
                let attn_base = gi * heads * len * len;
                let attn = &saved_attn[attn_base..attn_base + heads * len * len];
                if needs_v {
                    for l2 in 0..len {
                        let dvrow = &mut dv[(row0 + l2) * d..(row0 + l2) * d + d];
                        for h in 0..heads {
                            let base = h * dh;
                            let mut local = $make_acc(dh);
                            for l1 in 0..len {
                                let w = attn[h * len * len + l1 * len + l2];
                                let grow = &g[(row0 + l1) * d + base..(row0 + l1) * d + base + dh];
                                $fma$(::<T, $dh>)?(&mut local[..dh], grow, w);
                            }
                            for (o, &a) in dvrow[base..base + dh].iter_mut().zip(&local[..dh]) {
                                *o += a;
                            }
                        }
                    }
                }
                if needs_q || needs_k {
                    for l1 in 0..len {
                        let grow = &g[(row0 + l1) * d..(row0 + l1) * d + d];
                        for l2 in 0..len {
                            let vrow = &vd[(row0 + l2) * d..(row0 + l2) * d + d];
                            for h in 0..heads {
                                let base = h * dh;
                                let s = $dot$(::<T, $dh>)?(&grow[base..base + dh], &vrow[base..base + dh]);
                                d_scores[h * len * len + l1 * len + l2] = s;
                            }
                        }
                    }
                    for r in 0..heads * len {
                        let arow = &attn[r * len..(r + 1) * len];
                        let darow = &mut d_scores[r * len..(r + 1) * len];
                        let mut dot = T::ZERO;
                        for (a, da) in arow.iter().zip(darow.iter()) {
                            dot += *a * *da;
                        }
                        for (o, &a) in darow.iter_mut().zip(arow) {
                            *o = a * (*o - dot);
                        }
                    }
                    if needs_q {
                        for l1 in 0..len {
                            let dqrow = &mut dq[(row0 + l1) * d..(row0 + l1) * d + d];
                            for h in 0..heads {
                                let base = h * dh;
                                let mut local = $make_acc(dh);
                                for l2 in 0..len {
                                    let w = d_scores[h * len * len + l1 * len + l2];
                                    let krow = &kd[(row0 + l2) * d + base..(row0 + l2) * d + base + dh];
                                    $fma$(::<T, $dh>)?(&mut local[..dh], krow, w);
                                }
                                for (o, &a) in dqrow[base..base + dh].iter_mut().zip(&local[..dh]) {
                                    *o += scale * a;
                                }
                            }
                        }
                    }
                    if needs_k {
                        for l2 in 0..len {
                            let dkrow = &mut dk[(row0 + l2) * d..(row0 + l2) * d + d];
                            for h in 0..heads {
                                let base = h * dh;
                                let mut local = $make_acc(dh);
                                for l1 in 0..len {
                                    let w = d_scores[h * len * len + l1 * len + l2];
                                    let qrow = &qd[(row0 + l1) * d + base..(row0 + l1) * d + base + dh];
                                    $fma$(::<T, $dh>)?(&mut local[..dh], qrow, w);
                                }
                                for (o, &a) in dkrow[base..base + dh].iter_mut().zip(&local[..dh]) {
                                    *o += scale * a;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
}

attn_impls!(forward_const, backward_const, dot_n, fma_n, |_n: usize| [T::ZERO; DH], const DH: usize);
attn_impls!(forward_dyn, backward_dyn, dot_dyn, fma_dyn, |n: usize| vec![T::ZERO; n]);

#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    qv: &[T],
    kv: &[T],
    vv: &[T],
    out: &mut [T],
    saved_attn: &mut [T],
    groups: usize,
    len: usize,
    heads: usize,
    d: usize,
    scale: T,
) {
    let dh = d / heads;
    match dh {
        8 => forward_const::<T, 8>(qv, kv, vv, out, saved_attn, groups, len, heads, dh, d, scale),
        16 => forward_const::<T, 16>(qv, kv, vv, out, saved_attn, groups, len, heads, dh, d, scale),
        32 => forward_const::<T, 32>(qv, kv, vv, out, saved_attn, groups, len, heads, dh, d, scale),
        _ => forward_dyn(qv, kv, vv, out, saved_attn, groups, len, heads, dh, d, scale),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    qd: &[T],
    kd: &[T],
    vd: &[T],
    g: &[T],
    saved_attn: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    d_scores: &mut [T],
    needs: (bool, bool, bool),
    groups: usize,
    len: usize,
    heads: usize,
    d: usize,
    scale: T,
) {
    let dh = d / heads;
    let (nq, nk, nv) = needs;
    match dh {
        8 => backward_const::<T, 8>(qd, kd, vd, g, saved_attn, dq, dk, dv, d_scores, nq, nk, nv, groups, len, heads, dh, d, scale),
        16 => backward_const::<T, 16>(qd, kd, vd, g, saved_attn, dq, dk, dv, d_scores, nq, nk, nv, groups, len, heads, dh, d, scale),
        32 => backward_const::<T, 32>(qd, kd, vd, g, saved_attn, dq, dk, dv, d_scores, nq, nk, nv, groups, len, heads, dh, d, scale),
        _ => backward_dyn(qd, kd, vd, g, saved_attn, dq, dk, dv, d_scores, nq, nk, nv, groups, len, heads, dh, d, scale),
    }
}
