//! Reverse-mode differentiation via a recorded operation tape.
//!
//! Operations are recorded in forward order; `backward` replays them in
//! reverse, accumulating vector-Jacobian products. Only first-order
//! gradients are supported. Ops are batched (attention and graph
//! aggregation work on whole token groups) so the hot path stays inside
//! dense gemm calls.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Constant adjacency used by graph aggregation nodes. Either one matrix
/// shared by every group or one matrix per group (row-major `len x len`).
#[derive(Debug, Clone)]
pub enum Adjacency<T> {
    Shared(Arc<Vec<T>>),
    PerGroup(Arc<Vec<Vec<T>>>),
}

impl<T> Adjacency<T> {
    fn group(&self, g: usize) -> &[T] {
        match self {
            Adjacency::Shared(a) => a,
            Adjacency::PerGroup(v) => &v[g],
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// a . b + bias broadcast over rows.
    MatmulBias { a: Var, b: Var, bias: Var },
    /// Broadcast-add a length-`cols` bias vector to every row.
    AddBias { x: Var, b: Var },
    /// Add `table[(row / stride) % p]` to each row; backs positional tables.
    AddTable { x: Var, table: Var, stride: usize, p: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, c: T },
    /// a + c * b
    AddScaled { a: Var, b: Var, c: T },
    LayerNorm { x: Var, gain: Var, bias: Var, saved: Vec<(T, T)> },
    Gelu { x: Var },
    /// Row permutation: `out[i] = x[src[i]]` (src is a bijection).
    PermuteRows { x: Var, src: Arc<Vec<u32>> },
    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences of length `len`; q/k/v are `[groups*len, heads*dh]`.
    Attention { q: Var, k: Var, v: Var, groups: usize, len: usize, heads: usize, saved_attn: Vec<T> },
    /// out_g = adj_g . x_g for constant adjacency.
    AdjAggregate { x: Var, adj: Adjacency<T>, groups: usize, len: usize },
    /// Convex per-channel fusion of two streams with learned 2x2 logit maps.
    AdaptiveFuse { ft: Var, fg: Var, w: Var, b: Var, saved_alpha: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    /// Mean over rows of the row Euclidean norm; produces a scalar.
    RowL2Mean { x: Var, saved_norms: Vec<T> },
    Concat2 { a: Var, b: Var },
    SumAll { x: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward mode: training enables dropout, evaluation disables it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    dropout_counter: u64,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_vars: HashMap::new(), mode, dropout_counter: 0 }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Registers a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter leaf; repeated registration of the same
    /// parameter returns the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    /// A leaf that participates in differentiation without being a stored
    /// parameter (used by op-level gradient tests).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // ── op builders ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    /// `a . b + bias`, the bias broadcast over rows; one node instead of a
    /// matmul/add pair.
    pub fn matmul_bias(&mut self, a: Var, b: Var, bias: Var) -> Result<Var> {
        let mut value = kernels::matmul(self.value(a), self.value(b))?;
        let cols = value.cols();
        if self.value(bias).numel() != cols {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {} columns",
                self.value(bias).numel(),
                cols
            )));
        }
        let bv = &self.nodes[bias.0].value;
        for row in value.data_mut().chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(b) || self.needs(bias);
        Ok(self.push(value, Op::MatmulBias { a, b, bias }, needs))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).numel() != cols {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {} columns",
                self.value(b).numel(),
                cols
            )));
        }
        let mut value = self.value(x).clone();
        let bias = &self.nodes[b.0].value;
        for row in value.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias { x, b }, needs))
    }

    /// Adds `table[(row / stride) % p]` to each row of `x`.
    pub fn add_table(&mut self, x: Var, table: Var, stride: usize, p: usize) -> Result<Var> {
        let cols = self.value(x).cols();
        let t = self.value(table);
        if t.shape() != [p, cols] {
            return Err(Error::Dimension(format!(
                "position table shape {:?}, expected [{}, {}]",
                t.shape(),
                p,
                cols
            )));
        }
        let mut value = self.value(x).clone();
        let table_data = &self.nodes[table.0].value;
        for (i, row) in value.data_mut().chunks_mut(cols).enumerate() {
            let slot = (i / stride) % p;
            for (v, &tv) in row.iter_mut().zip(&table_data.data()[slot * cols..(slot + 1) * cols]) {
                *v += tv;
            }
        }
        let needs = self.needs(x) || self.needs(table);
        Ok(self.push(value, Op::AddTable { x, table, stride, p }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MulElem { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// a + c * b
    pub fn add_scaled(&mut self, a: Var, b: Var, c: T) -> Result<Var> {
        let value = self.value(a).zip(self.value(b), |x, y| x + c * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddScaled { a, b, c }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if cols == 0 {
            return Err(Error::Dimension("layer_norm needs a non-empty last axis".into()));
        }
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::Dimension("layer_norm affine parameter length mismatch".into()));
        }
        let rows = self.value(x).rows();
        let mut value = self.value(x).clone();
        let mut saved = Vec::with_capacity(rows);
        kernels::layer_norm_rows_inplace(
            value.data_mut(),
            rows,
            cols,
            self.nodes[gain.0].value.data(),
            self.nodes[bias.0].value.data(),
            T::from_f64(eps),
            Some(&mut saved),
        );
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, saved }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        kernels::gelu_slice_inplace(value.data_mut());
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn permute_rows(&mut self, x: Var, src: Arc<Vec<u32>>) -> Result<Var> {
        let rows = self.value(x).rows();
        let cols = self.value(x).cols();
        if src.len() != rows {
            return Err(Error::Dimension(format!(
                "permutation of {} rows applied to {} rows",
                src.len(),
                rows
            )));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; rows * cols];
        for (i, &s) in src.iter().enumerate() {
            let s = s as usize;
            out[i * cols..(i + 1) * cols].copy_from_slice(&xv[s * cols..(s + 1) * cols]);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::PermuteRows { x, src }, needs))
    }

    /// Multi-head scaled dot-product attention over independent groups.
    /// q/k/v are `[groups*len, heads*dh]`; attention weights are saved for
    /// the backward pass and for row-stochasticity hooks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, len: usize, heads: usize) -> Result<Var> {
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("model dim {} not divisible by {} heads", d, heads)));
        }
        if self.value(q).rows() != groups * len
            || self.value(k).rows() != groups * len
            || self.value(v).rows() != groups * len
            || self.value(k).cols() != d
            || self.value(v).cols() != d
        {
            return Err(Error::Dimension("attention q/k/v shape mismatch".into()));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![T::ZERO; groups * len * d];
        let mut saved_attn = vec![T::ZERO; groups * heads * len * len];
        crate::numerics::attn_core::forward(qv, kv, vv, &mut out, &mut saved_attn, groups, len, heads, d, scale);
        let value = Tensor::new(vec![groups * len, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(value, Op::Attention { q, k, v, groups, len, heads, saved_attn }, needs))
    }

    /// out_g = adj_g . x_g with constant (non-differentiated) adjacency.
    pub fn adj_aggregate(&mut self, x: Var, adj: Adjacency<T>, groups: usize, len: usize) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(x).rows() != groups * len {
            return Err(Error::Dimension(format!(
                "adjacency aggregation over {} groups of {} rows applied to {} rows",
                groups,
                len,
                self.value(x).rows()
            )));
        }
        if let Adjacency::PerGroup(v) = &adj {
            if v.len() != groups {
                return Err(Error::Dimension("one adjacency per group required".into()));
            }
            if v.iter().any(|a| a.len() != len * len) {
                return Err(Error::Dimension("adjacency matrices must be len x len".into()));
            }
        }
        if let Adjacency::Shared(a) = &adj {
            if a.len() != len * len {
                return Err(Error::Dimension("adjacency matrix must be len x len".into()));
            }
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; groups * len * d];
        for g in 0..groups {
            let a = adj.group(g);
            let xg = &xv[g * len * d..(g + 1) * len * d];
            let og = &mut out[g * len * d..(g + 1) * len * d];
            // d-wide contiguous accumulation; the matrices are too small
            // for a general gemm to pay for its packing
            for l1 in 0..len {
                let orow = &mut og[l1 * d..(l1 + 1) * d];
                for (l2, &w) in a[l1 * len..(l1 + 1) * len].iter().enumerate() {
                    if w != T::ZERO {
                        for (o, &xc) in orow.iter_mut().zip(&xg[l2 * d..(l2 + 1) * d]) {
                            *o += w * xc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![groups * len, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AdjAggregate { x, adj, groups, len }, needs))
    }

    /// Convex combination of two streams: per channel c, logits
    /// `(lt, lg) = W_c . (ft_c, fg_c) + b_c`, weights `softmax(lt, lg)`,
    /// output `alpha_t*ft + alpha_g*fg`. `w` is `[d, 4]`
    /// (rows `[wtt, wtg, wgt, wgg]`), `b` is `[d, 2]`.
    pub fn adaptive_fuse(&mut self, ft: Var, fg: Var, w: Var, b: Var) -> Result<Var> {
        let d = self.value(ft).cols();
        if self.value(ft).shape() != self.value(fg).shape() {
            return Err(Error::Dimension("fusion streams must share a shape".into()));
        }
        if self.value(w).shape() != [d, 4] || self.value(b).shape() != [d, 2] {
            return Err(Error::Dimension("fusion parameters must be [d,4] and [d,2]".into()));
        }
        let rows = self.value(ft).rows();
        let ftv = self.nodes[ft.0].value.data();
        let fgv = self.nodes[fg.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![T::ZERO; rows * d];
        let mut saved_alpha = vec![T::ZERO; rows * d];
        // per-channel coefficient differences, hoisted so the row loop is a
        // chain of vectorizable passes (softmax over two logits == sigmoid
        // of their difference)
        let dw_t: Vec<T> = (0..d).map(|c| wv[c * 4] - wv[c * 4 + 2]).collect();
        let dw_g: Vec<T> = (0..d).map(|c| wv[c * 4 + 1] - wv[c * 4 + 3]).collect();
        let db: Vec<T> = (0..d).map(|c| bv[c * 2] - bv[c * 2 + 1]).collect();
        for r in 0..rows {
            let ft_row = &ftv[r * d..(r + 1) * d];
            let fg_row = &fgv[r * d..(r + 1) * d];
            let a_row = &mut saved_alpha[r * d..(r + 1) * d];
            for c in 0..d {
                let delta = dw_t[c] * ft_row[c] + dw_g[c] * fg_row[c] + db[c];
                a_row[c] = T::ONE / (T::ONE + (-delta).exp());
            }
            for (c, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = a_row[c] * ft_row[c] + (T::ONE - a_row[c]) * fg_row[c];
            }
        }
        let value = Tensor::new(self.value(ft).shape().to_vec(), out)?;
        let needs = self.needs(ft) || self.needs(fg) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::AdaptiveFuse { ft, fg, w, b, saved_alpha }, needs))
    }

    /// Inverted dropout; identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let seed = match self.mode {
            Mode::Eval => return x,
            Mode::Train { dropout_seed } => dropout_seed,
        };
        if p <= 0.0 {
            return x;
        }
        self.dropout_counter += 1;
        let base = seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(self.dropout_counter.wrapping_mul(0xBF58476D1CE4E5B9));
        let keep = T::from_f64(1.0 / (1.0 - p));
        // four 16-bit draws per counter-based splitmix call; the keep rate
        // is quantized to 1/65536 of the requested probability
        let thresh = (p * 65536.0) as u64;
        let numel = self.value(x).numel();
        let xv = self.nodes[x.0].value.data();
        let mut mask: Vec<T> = vec![keep; numel];
        let mut out: Vec<T> = Vec::with_capacity(numel);
        for (i, (mch, xch)) in mask.chunks_mut(4).zip(xv.chunks(4)).enumerate() {
            let r = splitmix64(base ^ (i as u64).wrapping_mul(0xD1342543DE82EF95));
            for (lane, (m, &x)) in mch.iter_mut().zip(xch).enumerate() {
                if (r >> (16 * lane)) & 0xFFFF < thresh {
                    *m = T::ZERO;
                }
                out.push(*m * x);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("dropout preserves shape");
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    /// Mean over rows of the row Euclidean norm (an MPJPE-form reduction).
    pub fn row_l2_mean(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        let cols = self.value(x).cols();
        let xv = self.nodes[x.0].value.data();
        let mut norms = Vec::with_capacity(rows);
        let mut total = T::ZERO;
        for r in 0..rows {
            let mut s = T::ZERO;
            for &v in &xv[r * cols..(r + 1) * cols] {
                s += v * v;
            }
            let n = s.sqrt();
            norms.push(n);
            total += n;
        }
        let mean = total / T::from_f64(rows as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::RowL2Mean { x, saved_norms: norms }, needs)
    }

    pub fn concat2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = (self.value(a).rows(), self.value(a).cols());
        let (rb, cb) = (self.value(b).rows(), self.value(b).cols());
        if ra != rb {
            return Err(Error::Dimension("concat2 row counts differ".into()));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat2 { a, b }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    // ── introspection hooks ──────────────────────────────────────

    /// Row sums of every saved attention matrix, for row-stochasticity
    /// assertions in tests.
    pub fn attention_row_sums(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Attention { len, saved_attn, .. } = &node.op {
                for row in saved_attn.chunks(*len) {
                    out.push(row.iter().map(|v| v.to_f64()).sum());
                }
            }
        }
        out
    }

    // ── backward ─────────────────────────────────────────────────

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter leaf (zeros if no gradient flowed).
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<T>> {
        let v = self.param_vars.get(&id)?;
        Some(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.nodes[v.0].value.numel()],
        })
    }

    pub fn registered_params(&self) -> Vec<ParamId> {
        self.param_vars.keys().copied().collect()
    }

    /// Runs the reverse pass from a scalar loss node. Gradients of
    /// intermediate nodes are freed as soon as they have been consumed;
    /// leaf gradients are retained.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        if !self.nodes[loss.0].value.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backward_node(&self.nodes, &mut self.grads, i, &g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    if grads[v.0].is_none() {
        grads[v.0] = Some(vec![T::ZERO; nodes[v.0].value.numel()]);
    }
    grads[v.0].as_mut().unwrap()
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let needs = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatmulBias { a, b, bias } => {
            let (a, b, bias) = (*a, *b, *bias);
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if needs(bias) {
                let buf = grad_buf(grads, nodes, bias);
                for row in g.chunks(n) {
                    for (bg, &gv) in buf.iter_mut().zip(row) {
                        *bg += gv;
                    }
                }
            }
            if needs(a) {
                let bv = val(b).data().as_ptr();
                let buf = grad_buf(grads, nodes, a);
                unsafe {
                    gemm_strided(
                        m, n, k, T::ONE,
                        g.as_ptr(), n as isize, 1,
                        bv, 1, n as isize,
                        T::ONE, buf.as_mut_ptr(), k as isize, 1,
                    );
                }
            }
            if needs(b) {
                let av = val(a).data().as_ptr();
                let buf = grad_buf(grads, nodes, b);
                unsafe {
                    gemm_strided(
                        k, m, n, T::ONE,
                        av, 1, k as isize,
                        g.as_ptr(), n as isize, 1,
                        T::ONE, buf.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            if needs(a) {
                // dA += G . B^T
                let bv = val(b).data().as_ptr();
                let buf = grad_buf(grads, nodes, a);
                unsafe {
                    gemm_strided(
                        m, n, k, T::ONE,
                        g.as_ptr(), n as isize, 1,
                        bv, 1, n as isize,
                        T::ONE, buf.as_mut_ptr(), k as isize, 1,
                    );
                }
            }
            if needs(b) {
                // dB += A^T . G
                let av = val(a).data().as_ptr();
                let buf = grad_buf(grads, nodes, b);
                unsafe {
                    gemm_strided(
                        k, m, n, T::ONE,
                        av, 1, k as isize,
                        g.as_ptr(), n as isize, 1,
                        T::ONE, buf.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
        Op::AddBias { x, b } => {
            let (x, b) = (*x, *b);
            let cols = val(b).numel();
            if needs(x) {
                acc(grad_buf(grads, nodes, x), g);
            }
            if needs(b) {
                let buf = grad_buf(grads, nodes, b);
                for row in g.chunks(cols) {
                    for (bg, &gv) in buf.iter_mut().zip(row) {
                        *bg += gv;
                    }
                }
            }
        }
        Op::AddTable { x, table, stride, p } => {
            let (x, table, stride, p) = (*x, *table, *stride, *p);
            let cols = nodes[i].value.cols();
            if needs(x) {
                acc(grad_buf(grads, nodes, x), g);
            }
            if needs(table) {
                let buf = grad_buf(grads, nodes, table);
                for (r, row) in g.chunks(cols).enumerate() {
                    let slot = (r / stride) % p;
                    for (tg, &gv) in buf[slot * cols..(slot + 1) * cols].iter_mut().zip(row) {
                        *tg += gv;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            if needs(a) {
                acc(grad_buf(grads, nodes, a), g);
            }
            if needs(b) {
                acc(grad_buf(grads, nodes, b), g);
            }
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            if needs(a) {
                acc(grad_buf(grads, nodes, a), g);
            }
            if needs(b) {
                for (bg, &gv) in grad_buf(grads, nodes, b).iter_mut().zip(g) {
                    *bg -= gv;
                }
            }
        }
        Op::MulElem { a, b } => {
            let (a, b) = (*a, *b);
            if needs(a) {
                let bd = val(b).data();
                for ((ag, &gv), &bvv) in grad_buf(grads, nodes, a).iter_mut().zip(g).zip(bd) {
                    *ag += gv * bvv;
                }
            }
            if needs(b) {
                let ad = val(a).data();
                for ((bg, &gv), &avv) in grad_buf(grads, nodes, b).iter_mut().zip(g).zip(ad) {
                    *bg += gv * avv;
                }
            }
        }
        Op::Scale { x, c } => {
            let (x, c) = (*x, *c);
            if needs(x) {
                for (xg, &gv) in grad_buf(grads, nodes, x).iter_mut().zip(g) {
                    *xg += gv * c;
                }
            }
        }
        Op::AddScaled { a, b, c } => {
            let (a, b, c) = (*a, *b, *c);
            if needs(a) {
                acc(grad_buf(grads, nodes, a), g);
            }
            if needs(b) {
                for (bg, &gv) in grad_buf(grads, nodes, b).iter_mut().zip(g) {
                    *bg += gv * c;
                }
            }
        }
        Op::LayerNorm { x, gain, bias, saved } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let cols = val(x).cols();
            let rows = val(x).rows();
            let inv_n = T::ONE / T::from_f64(cols as f64);
            if needs(bias) {
                let buf = grad_buf(grads, nodes, bias);
                for row in g.chunks(cols) {
                    for (bg, &gvv) in buf.iter_mut().zip(row) {
                        *bg += gvv;
                    }
                }
            }
            if needs(gain) {
                let xd = val(x).data();
                let mut dgain = vec![T::ZERO; cols];
                for (r, row) in g.chunks(cols).enumerate() {
                    let (mean, rstd) = saved[r];
                    for (c, (dg, &gvv)) in dgain.iter_mut().zip(row).enumerate() {
                        let xh = (xd[r * cols + c] - mean) * rstd;
                        *dg += gvv * xh;
                    }
                }
                acc(grad_buf(grads, nodes, gain), &dgain);
            }
            if needs(x) {
                let xd = val(x).data();
                let gaind = val(gain).data();
                let buf = grad_buf(grads, nodes, x);
                for r in 0..rows {
                    let (mean, rstd) = saved[r];
                    let xrow = &xd[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut s1 = [T::ZERO; 8];
                    let mut s2 = [T::ZERO; 8];
                    for (i, (&xv, &gv)) in xrow.iter().zip(grow).enumerate() {
                        let xh = (xv - mean) * rstd;
                        let dxh = gv * gaind[i];
                        s1[i & 7] += dxh;
                        s2[i & 7] += dxh * xh;
                    }
                    let m1 = ((s1[0] + s1[4]) + (s1[1] + s1[5]) + ((s1[2] + s1[6]) + (s1[3] + s1[7]))) * inv_n;
                    let m2 = ((s2[0] + s2[4]) + (s2[1] + s2[5]) + ((s2[2] + s2[6]) + (s2[3] + s2[7]))) * inv_n;
                    let brow = &mut buf[r * cols..(r + 1) * cols];
                    for (i, ((b, &xv), &gv)) in brow.iter_mut().zip(xrow).zip(grow).enumerate() {
                        let xh = (xv - mean) * rstd;
                        let dxh = gv * gaind[i];
                        *b += rstd * (dxh - m1 - xh * m2);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let x = *x;
            if needs(x) {
                let xd = val(x).data();
                T::gelu_grad_acc(xd, g, grad_buf(grads, nodes, x));
            }
        }
        Op::PermuteRows { x, src } => {
            let x = *x;
            let cols = nodes[i].value.cols();
            if needs(x) {
                let buf = grad_buf(grads, nodes, x);
                for (r, &s) in src.iter().enumerate() {
                    let s = s as usize;
                    for (bg, &gv) in buf[s * cols..(s + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *bg += gv;
                    }
                }
            }
        }
        Op::Attention { q, k, v, groups, len, heads, saved_attn } => {
            let (q, k, v, groups, len, heads) = (*q, *k, *v, *groups, *len, *heads);
            let d = val(q).cols();
            let dh = d / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let needs_q = needs(q);
            let needs_k = needs(k);
            let needs_v = needs(v);
            let mut dq = vec![T::ZERO; if needs_q { groups * len * d } else { 0 }];
            let mut dk = vec![T::ZERO; if needs_k { groups * len * d } else { 0 }];
            let mut dv = vec![T::ZERO; if needs_v { groups * len * d } else { 0 }];
            let mut d_scores = vec![T::ZERO; heads * len * len];
            let qd = val(q).data();
            let kd = val(k).data();
            let vd = val(v).data();
            crate::numerics::attn_core::backward(
                qd, kd, vd, g, saved_attn, &mut dq, &mut dk, &mut dv, &mut d_scores,
                (needs_q, needs_k, needs_v), groups, len, heads, d, scale,
            );
            if needs_q {
                acc(grad_buf(grads, nodes, q), &dq);
            }
            if needs_k {
                acc(grad_buf(grads, nodes, k), &dk);
            }
            if needs_v {
                acc(grad_buf(grads, nodes, v), &dv);
            }
        }
        Op::AdjAggregate { x, adj, groups, len } => {
            let (x, groups, len) = (*x, *groups, *len);
            let d = nodes[i].value.cols();
            if needs(x) {
                let buf = grad_buf(grads, nodes, x);
                for gi in 0..groups {
                    let a = adj.group(gi);
                    let gg = &g[gi * len * d..(gi + 1) * len * d];
                    let bg = &mut buf[gi * len * d..(gi + 1) * len * d];
                    // dX_g += A_g^T . G_g
                    for l1 in 0..len {
                        let grow = &gg[l1 * d..(l1 + 1) * d];
                        for (l2, &w) in a[l1 * len..(l1 + 1) * len].iter().enumerate() {
                            if w != T::ZERO {
                                for (o, &gv) in bg[l2 * d..(l2 + 1) * d].iter_mut().zip(grow) {
                                    *o += w * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AdaptiveFuse { ft, fg, w, b, saved_alpha } => {
            let (ft, fg, w, b) = (*ft, *fg, *w, *b);
            let d = val(ft).cols();
            let rows = val(ft).rows();
            let needs_ft = needs(ft);
            let needs_fg = needs(fg);
            let needs_w = needs(w);
            let needs_b = needs(b);
            let ftd = val(ft).data();
            let fgd = val(fg).data();
            let wd = val(w).data();
            let mut dft = vec![T::ZERO; if needs_ft { rows * d } else { 0 }];
            let mut dfg = vec![T::ZERO; if needs_fg { rows * d } else { 0 }];
            let mut dw = vec![T::ZERO; if needs_w { d * 4 } else { 0 }];
            let mut db = vec![T::ZERO; if needs_b { d * 2 } else { 0 }];
            for r in 0..rows {
                for c in 0..d {
                    let idx = r * d + c;
                    let alpha = saved_alpha[idx];
                    let t = ftd[idx];
                    let fgc = fgd[idx];
                    let gv = g[idx];
                    let ddelta = gv * alpha * (T::ONE - alpha) * (t - fgc);
                    if needs_ft {
                        dft[idx] = gv * alpha + ddelta * (wd[c * 4] - wd[c * 4 + 2]);
                    }
                    if needs_fg {
                        dfg[idx] = gv * (T::ONE - alpha) + ddelta * (wd[c * 4 + 1] - wd[c * 4 + 3]);
                    }
                    if needs_w {
                        dw[c * 4] += ddelta * t;
                        dw[c * 4 + 1] += ddelta * fgc;
                        dw[c * 4 + 2] -= ddelta * t;
                        dw[c * 4 + 3] -= ddelta * fgc;
                    }
                    if needs_b {
                        db[c * 2] += ddelta;
                        db[c * 2 + 1] -= ddelta;
                    }
                }
            }
            if needs_ft {
                acc(grad_buf(grads, nodes, ft), &dft);
            }
            if needs_fg {
                acc(grad_buf(grads, nodes, fg), &dfg);
            }
            if needs_w {
                acc(grad_buf(grads, nodes, w), &dw);
            }
            if needs_b {
                acc(grad_buf(grads, nodes, b), &db);
            }
        }
        Op::Dropout { x, mask } => {
            let x = *x;
            if needs(x) {
                let buf = grad_buf(grads, nodes, x);
                for ((xg, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *xg += gv * m;
                }
            }
        }
        Op::RowL2Mean { x, saved_norms } => {
            let x = *x;
            let cols = val(x).cols();
            let rows = val(x).rows();
            let tiny = T::from_f64(1e-300);
            if needs(x) {
                let xd = val(x).data();
                let s = g[0] / T::from_f64(rows as f64);
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    let n = saved_norms[r];
                    if n > tiny {
                        let coef = s / n;
                        for c in 0..cols {
                            dx[r * cols + c] = coef * xd[r * cols + c];
                        }
                    }
                }
                acc(grad_buf(grads, nodes, x), &dx);
            }
        }
        Op::Concat2 { a, b } => {
            let (a, b) = (*a, *b);
            let ca = val(a).cols();
            let cb = val(b).cols();
            let rows = val(a).rows();
            if needs(a) {
                let buf = grad_buf(grads, nodes, a);
                for r in 0..rows {
                    for c in 0..ca {
                        buf[r * ca + c] += g[r * (ca + cb) + c];
                    }
                }
            }
            if needs(b) {
                let buf = grad_buf(grads, nodes, b);
                for r in 0..rows {
                    for c in 0..cb {
                        buf[r * cb + c] += g[r * (ca + cb) + ca + c];
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let x = *x;
            if needs(x) {
                let gv = g[0];
                for xg in grad_buf(grads, nodes, x).iter_mut() {
                    *xg += gv;
                }
            }
        }
    }
}

#[inline]
fn acc<T: Scalar>(buf: &mut [T], g: &[T]) {
    debug_assert_eq!(buf.len(), g.len());
    for (b, &v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Raw strided gemm dispatching to the scalar type's kernel.
///
/// # Safety
/// Pointers must be valid for the implied `m x k`, `k x n`, `m x n` strided
/// accesses.
pub(crate) unsafe fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    use std::any::TypeId;
    if TypeId::of::<T>() == TypeId::of::<f64>() {
        matrixmultiply::dgemm(
            m, k, n,
            alpha.to_f64(),
            a as *const f64, rsa, csa,
            b as *const f64, rsb, csb,
            beta.to_f64(),
            c as *mut f64, rsc, csc,
        );
    } else if TypeId::of::<T>() == TypeId::of::<f32>() {
        matrixmultiply::sgemm(
            m, k, n,
            alpha.to_f64() as f32,
            a as *const f32, rsa, csa,
            b as *const f32, rsb, csb,
            beta.to_f64() as f32,
            c as *mut f32, rsc, csc,
        );
    } else {
        unreachable!("Scalar is implemented for f32 and f64 only");
    }
}
