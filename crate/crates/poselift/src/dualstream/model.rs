//! The backbone: per-joint token embedding with timestep conditioning,
//! learnable positional tables, a stack of parallel Transformer/GCN fusion
//! blocks, and the widened regression head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::Denoiser;
use crate::dualstream::config::{BackboneConfig, StreamMode};
use crate::dualstream::ops::{knn_group_adjacencies, normalize_adjacency, spatial_perm, temporal_perm, DualStreamState};
use crate::error::{Error, Result};
use crate::numerics::tape::{Adjacency, Mode, Tape};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor, Var};
use crate::skeleton::{JointSequence2D, JointSequence3D, SkeletonTopology};

#[derive(Debug, Clone, Copy)]
pub struct AttnHandles {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
    pub bv: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpHandles {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnHandles {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockHandles {
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub sattn: AttnHandles,
    pub smlp: MlpHandles,
    pub tattn: AttnHandles,
    pub tmlp: MlpHandles,
    pub sgcn: GcnHandles,
    pub tgcn: GcnHandles,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneHandles {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub blocks: Vec<BlockHandles>,
    pub head_norm_gain: ParamId,
    pub head_norm_bias: ParamId,
    pub head_expand_w: ParamId,
    pub head_expand_b: ParamId,
    pub head_out_w: ParamId,
    pub head_out_b: ParamId,
}

/// Input channels per token: 2D condition (2) + noisy 3D (3).
const COND_CHANNELS: usize = 5;

/// Width of the sinusoidal timestep embedding concatenated to each token;
/// kept well below `d` so the 2D conditioning is not drowned out.
pub fn temb_dim(d: usize) -> usize {
    (d / 4).max(2)
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn kaiming<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        // uniform fan-in scaling
        let bound = (6.0 / rows as f64).sqrt();
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        store.register(name, Tensor::new(vec![rows, cols], data)?)
    }

    fn table<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let data: Vec<T> = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.random_range(-0.02..0.02)))
            .collect();
        store.register(name, Tensor::new(vec![rows, cols], data)?)
    }

    fn zeros<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, shape: Vec<usize>) -> Result<ParamId> {
        store.register(name, Tensor::zeros(shape))
    }

    fn ones<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: String, len: usize) -> Result<ParamId> {
        store.register(name, Tensor::full(vec![len], T::ONE))
    }

    fn attn<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<AttnHandles> {
        Ok(AttnHandles {
            norm_gain: self.ones(store, format!("{prefix}.norm.gain"), d)?,
            norm_bias: self.zeros(store, format!("{prefix}.norm.bias"), vec![d])?,
            wq: self.kaiming(store, format!("{prefix}.wq"), d, d)?,
            wk: self.kaiming(store, format!("{prefix}.wk"), d, d)?,
            wv: self.kaiming(store, format!("{prefix}.wv"), d, d)?,
            wo: self.kaiming(store, format!("{prefix}.wo"), d, d)?,
            bq: self.zeros(store, format!("{prefix}.bq"), vec![d])?,
            bk: self.zeros(store, format!("{prefix}.bk"), vec![d])?,
            bv: self.zeros(store, format!("{prefix}.bv"), vec![d])?,
            bo: self.zeros(store, format!("{prefix}.bo"), vec![d])?,
        })
    }

    fn mlp<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize) -> Result<MlpHandles> {
        Ok(MlpHandles {
            norm_gain: self.ones(store, format!("{prefix}.norm.gain"), d)?,
            norm_bias: self.zeros(store, format!("{prefix}.norm.bias"), vec![d])?,
            w1: self.kaiming(store, format!("{prefix}.w1"), d, hidden)?,
            b1: self.zeros(store, format!("{prefix}.b1"), vec![hidden])?,
            w2: self.kaiming(store, format!("{prefix}.w2"), hidden, d)?,
            b2: self.zeros(store, format!("{prefix}.b2"), vec![d])?,
        })
    }

    fn gcn<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<GcnHandles> {
        Ok(GcnHandles {
            norm_gain: self.ones(store, format!("{prefix}.norm.gain"), d)?,
            norm_bias: self.zeros(store, format!("{prefix}.norm.bias"), vec![d])?,
            w: self.kaiming(store, format!("{prefix}.w"), d, d)?,
            b: self.zeros(store, format!("{prefix}.b"), vec![d])?,
        })
    }
}

/// Creates a freshly initialized parameter store for the given config.
/// Weight matrices use uniform fan-in scaling, positional tables start
/// small, the fusion projections start at zero so training begins at the
/// balanced 50/50 fusion.
pub fn init_params<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<(ParamStore<T>, BackboneHandles)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let d = cfg.d;
    let handles = BackboneHandles {
        embed_w: init.kaiming(&mut store, "embed.w".into(), COND_CHANNELS + temb_dim(d), d)?,
        embed_b: init.zeros(&mut store, "embed.b".into(), vec![d])?,
        pos_spatial: init.table(&mut store, "pos.spatial".into(), cfg.joints, d)?,
        pos_temporal: init.table(&mut store, "pos.temporal".into(), cfg.frames, d)?,
        blocks: (0..cfg.depth)
            .map(|i| {
                Ok(BlockHandles {
                    pos_spatial: init.table(&mut store, format!("block{i}.pos.spatial"), cfg.joints, d)?,
                    pos_temporal: init.table(&mut store, format!("block{i}.pos.temporal"), cfg.frames, d)?,
                    sattn: init.attn(&mut store, &format!("block{i}.t.sattn"), d)?,
                    smlp: init.mlp(&mut store, &format!("block{i}.t.smlp"), d, cfg.mlp_hidden())?,
                    tattn: init.attn(&mut store, &format!("block{i}.t.tattn"), d)?,
                    tmlp: init.mlp(&mut store, &format!("block{i}.t.tmlp"), d, cfg.mlp_hidden())?,
                    sgcn: init.gcn(&mut store, &format!("block{i}.g.sgcn"), d)?,
                    tgcn: init.gcn(&mut store, &format!("block{i}.g.tgcn"), d)?,
                    fuse_w: init.zeros(&mut store, format!("block{i}.fuse.w"), vec![d, 4])?,
                    fuse_b: init.zeros(&mut store, format!("block{i}.fuse.b"), vec![d, 2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        head_norm_gain: init.ones(&mut store, "head.norm.gain".into(), d)?,
        head_norm_bias: init.zeros(&mut store, "head.norm.bias".into(), vec![d])?,
        head_expand_w: init.kaiming(&mut store, "head.expand.w".into(), d, cfg.d_prime)?,
        head_expand_b: init.zeros(&mut store, "head.expand.b".into(), vec![cfg.d_prime])?,
        head_out_w: init.kaiming(&mut store, "head.out.w".into(), cfg.d_prime, 3)?,
        head_out_b: init.zeros(&mut store, "head.out.b".into(), vec![3])?,
    };
    Ok((store, handles))
}

/// Resolves handles by name against a store loaded from a checkpoint.
pub fn resolve_handles<T: Scalar>(store: &ParamStore<T>, cfg: &BackboneConfig) -> Result<BackboneHandles> {
    let get = |name: String| {
        store.id(&name).ok_or_else(|| Error::Format(format!("checkpoint is missing parameter '{}'", name)))
    };
    let attn = |prefix: &str| -> Result<AttnHandles> {
        Ok(AttnHandles {
            norm_gain: get(format!("{prefix}.norm.gain"))?,
            norm_bias: get(format!("{prefix}.norm.bias"))?,
            wq: get(format!("{prefix}.wq"))?,
            wk: get(format!("{prefix}.wk"))?,
            wv: get(format!("{prefix}.wv"))?,
            wo: get(format!("{prefix}.wo"))?,
            bq: get(format!("{prefix}.bq"))?,
            bk: get(format!("{prefix}.bk"))?,
            bv: get(format!("{prefix}.bv"))?,
            bo: get(format!("{prefix}.bo"))?,
        })
    };
    let mlp = |prefix: &str| -> Result<MlpHandles> {
        Ok(MlpHandles {
            norm_gain: get(format!("{prefix}.norm.gain"))?,
            norm_bias: get(format!("{prefix}.norm.bias"))?,
            w1: get(format!("{prefix}.w1"))?,
            b1: get(format!("{prefix}.b1"))?,
            w2: get(format!("{prefix}.w2"))?,
            b2: get(format!("{prefix}.b2"))?,
        })
    };
    let gcn = |prefix: &str| -> Result<GcnHandles> {
        Ok(GcnHandles {
            norm_gain: get(format!("{prefix}.norm.gain"))?,
            norm_bias: get(format!("{prefix}.norm.bias"))?,
            w: get(format!("{prefix}.w"))?,
            b: get(format!("{prefix}.b"))?,
        })
    };
    Ok(BackboneHandles {
        embed_w: get("embed.w".into())?,
        embed_b: get("embed.b".into())?,
        pos_spatial: get("pos.spatial".into())?,
        pos_temporal: get("pos.temporal".into())?,
        blocks: (0..cfg.depth)
            .map(|i| {
                Ok(BlockHandles {
                    pos_spatial: get(format!("block{i}.pos.spatial"))?,
                    pos_temporal: get(format!("block{i}.pos.temporal"))?,
                    sattn: attn(&format!("block{i}.t.sattn"))?,
                    smlp: mlp(&format!("block{i}.t.smlp"))?,
                    tattn: attn(&format!("block{i}.t.tattn"))?,
                    tmlp: mlp(&format!("block{i}.t.tmlp"))?,
                    sgcn: gcn(&format!("block{i}.g.sgcn"))?,
                    tgcn: gcn(&format!("block{i}.g.tgcn"))?,
                    fuse_w: get(format!("block{i}.fuse.w"))?,
                    fuse_b: get(format!("block{i}.fuse.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        head_norm_gain: get("head.norm.gain".into())?,
        head_norm_bias: get("head.norm.bias".into())?,
        head_expand_w: get("head.expand.w".into())?,
        head_expand_b: get("head.expand.b".into())?,
        head_out_w: get("head.out.w".into())?,
        head_out_b: get("head.out.b".into())?,
    })
}

/// Total learnable scalar count of a fresh model with this config.
pub fn param_count(cfg: &BackboneConfig) -> Result<usize> {
    let (store, _) = init_params::<f64>(cfg, 0)?;
    Ok(store.total_elements())
}

/// Sinusoidal timestep embedding of dimension `dim`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; dim];
    if half == 0 {
        if dim == 1 {
            out[0] = T::from_f64((t as f64).sin());
        }
        return out;
    }
    for i in 0..half {
        let freq = (10000.0f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = T::from_f64(arg.sin());
        out[half + i] = T::from_f64(arg.cos());
    }
    out
}

/// Flattened constant inputs of one forward pass, batch-major with
/// spatial-major token rows.
pub struct ForwardInput<T: Scalar> {
    pub tokens: Tensor<T>,
    pub batch: usize,
}

impl<T: Scalar> ForwardInput<T> {
    /// Assembles `[x2d | y_noisy | t_embedding]` per token for a batch of
    /// samples sharing the frame/joint geometry but each with its own
    /// diffusion step.
    pub fn assemble(
        cfg: &BackboneConfig,
        x2d: &[&Tensor<T>],
        y_noisy: &[&Tensor<T>],
        ts: &[usize],
    ) -> Result<Self> {
        let b = x2d.len();
        if b == 0 || y_noisy.len() != b || ts.len() != b {
            return Err(Error::Dimension("batch inputs must be non-empty and aligned".into()));
        }
        let rows_per = cfg.frames * cfg.joints;
        let width = COND_CHANNELS + temb_dim(cfg.d);
        let mut data = Vec::with_capacity(b * rows_per * width);
        for i in 0..b {
            if x2d[i].shape() != [rows_per, 2] {
                return Err(Error::Dimension(format!(
                    "2D condition must be [{}x2], got {:?}",
                    rows_per,
                    x2d[i].shape()
                )));
            }
            if y_noisy[i].shape() != [rows_per, 3] {
                return Err(Error::Dimension(format!(
                    "noisy pose must be [{}x3], got {:?}",
                    rows_per,
                    y_noisy[i].shape()
                )));
            }
            let temb = timestep_embedding::<T>(ts[i], temb_dim(cfg.d));
            for r in 0..rows_per {
                data.extend_from_slice(&x2d[i].data()[r * 2..(r + 1) * 2]);
                data.extend_from_slice(&y_noisy[i].data()[r * 3..(r + 1) * 3]);
                data.extend_from_slice(&temb);
            }
        }
        Ok(ForwardInput { tokens: Tensor::new(vec![b * rows_per, width], data)?, batch: b })
    }
}

/// The dual-stream backbone bound to a skeleton topology.
pub struct Backbone {
    cfg: BackboneConfig,
    handles: BackboneHandles,
    spatial_adj_f64: Vec<f64>,
}

struct BlockCtx<T: Scalar> {
    batch: usize,
    frames: usize,
    joints: usize,
    heads: usize,
    k: usize,
    dropout: f64,
    stream_mode: StreamMode,
    pde_enabled: bool,
    pde_h: f64,
    pde_steps: usize,
    spatial_adj: Adjacency<T>,
    to_temporal: Arc<Vec<u32>>,
    to_spatial: Arc<Vec<u32>>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, topo: &SkeletonTopology, handles: BackboneHandles) -> Result<Self> {
        cfg.validate()?;
        if topo.joint_count() != cfg.joints {
            return Err(Error::Config(format!(
                "topology has {} joints, config expects {}",
                topo.joint_count(),
                cfg.joints
            )));
        }
        if handles.blocks.len() != cfg.depth {
            return Err(Error::Config("handle count does not match depth".into()));
        }
        let j = topo.joint_count();
        let mut adj = Tensor::<f64>::zeros(vec![j, j]);
        for &(p, c) in topo.edges() {
            adj.set2(p, c, 1.0);
            adj.set2(c, p, 1.0);
        }
        let spatial_adj_f64 = normalize_adjacency(&adj)?;
        Ok(Backbone { cfg, handles, spatial_adj_f64 })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn handles(&self) -> &BackboneHandles {
        &self.handles
    }

    fn ctx<T: Scalar>(&self, batch: usize) -> BlockCtx<T> {
        let (n, j) = (self.cfg.frames, self.cfg.joints);
        BlockCtx {
            batch,
            frames: n,
            joints: j,
            heads: self.cfg.heads,
            k: self.cfg.k_neighbors,
            dropout: self.cfg.dropout,
            stream_mode: self.cfg.stream_mode,
            pde_enabled: self.cfg.pde.enabled,
            pde_h: self.cfg.pde.step_size,
            pde_steps: self.cfg.pde.steps,
            spatial_adj: Adjacency::Shared(Arc::new(
                self.spatial_adj_f64.iter().map(|&v| T::from_f64(v)).collect(),
            )),
            to_temporal: temporal_perm(batch, n, j),
            to_spatial: spatial_perm(batch, n, j),
        }
    }

    /// Runs the full backbone on a tape; returns the `[batch*frames*joints, 3]`
    /// regression output.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &ForwardInput<T>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let rows = input.batch * cfg.frames * cfg.joints;
        if input.tokens.shape() != [rows, COND_CHANNELS + temb_dim(cfg.d)] {
            return Err(Error::Dimension(format!(
                "forward input shape {:?} does not match config",
                input.tokens.shape()
            )));
        }
        let ctx = self.ctx::<T>(input.batch);
        let h = &self.handles;

        let tokens = tape.constant(input.tokens.clone());
        let embed_w = tape.param(store, h.embed_w);
        let embed_b = tape.param(store, h.embed_b);
        let mut x = tape.matmul_bias(tokens, embed_w, embed_b)?;
        let ps = tape.param(store, h.pos_spatial);
        x = tape.add_table(x, ps, 1, cfg.joints)?;
        let pt = tape.param(store, h.pos_temporal);
        x = tape.add_table(x, pt, cfg.joints, cfg.frames)?;

        for bh in &h.blocks {
            x = self.dual_block_on_tape(tape, store, x, bh, &ctx)?;
        }

        let gain = tape.param(store, h.head_norm_gain);
        let bias = tape.param(store, h.head_norm_bias);
        let u = tape.layer_norm(x, gain, bias, 1e-5)?;
        let ew = tape.param(store, h.head_expand_w);
        let eb = tape.param(store, h.head_expand_b);
        let mut e = tape.matmul_bias(u, ew, eb)?;
        e = tape.gelu(e);
        let ow = tape.param(store, h.head_out_w);
        let ob = tape.param(store, h.head_out_b);
        let out = tape.matmul_bias(e, ow, ob)?;
        Ok(out)
    }

    /// One dual-stream fusion block. Both streams read the same
    /// position-enriched input; the transformer stream applies spatial then
    /// temporal attention (each with a feed-forward sublayer), the GCN
    /// stream a body-graph convolution then a temporal-KNN convolution;
    /// adaptive fusion merges the two.
    fn dual_block_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        bh: &BlockHandles,
        ctx: &BlockCtx<T>,
    ) -> Result<Var> {
        let ps = tape.param(store, bh.pos_spatial);
        let x = tape.add_table(x, ps, 1, ctx.joints)?;
        let pt = tape.param(store, bh.pos_temporal);
        let x = tape.add_table(x, pt, ctx.joints, ctx.frames)?;

        let transformer = |tape: &mut Tape<T>| -> Result<Var> {
            let mut t = x;
            t = self.attn_sublayer(tape, store, t, &bh.sattn, ctx, ctx.batch * ctx.frames, ctx.joints)?;
            t = self.mlp_sublayer(tape, store, t, &bh.smlp, ctx)?;
            let mut tt = tape.permute_rows(t, ctx.to_temporal.clone())?;
            tt = self.attn_sublayer(tape, store, tt, &bh.tattn, ctx, ctx.batch * ctx.joints, ctx.frames)?;
            tt = self.mlp_sublayer(tape, store, tt, &bh.tmlp, ctx)?;
            tape.permute_rows(tt, ctx.to_spatial.clone())
        };
        let gcn = |tape: &mut Tape<T>| -> Result<Var> {
            let mut g = x;
            g = self.gcn_sublayer(tape, store, g, &bh.sgcn, ctx.spatial_adj.clone(), ctx.batch * ctx.frames, ctx.joints, ctx)?;
            let mut gt = tape.permute_rows(g, ctx.to_temporal.clone())?;
            gt = self.temporal_gcn_sublayer(tape, store, gt, &bh.tgcn, ctx)?;
            tape.permute_rows(gt, ctx.to_spatial.clone())
        };

        match ctx.stream_mode {
            StreamMode::TransformerOnly => transformer(tape),
            StreamMode::GcnOnly => gcn(tape),
            StreamMode::Parallel => {
                let t = transformer(tape)?;
                let g = gcn(tape)?;
                let fw = tape.param(store, bh.fuse_w);
                let fb = tape.param(store, bh.fuse_b);
                tape.adaptive_fuse(t, g, fw, fb)
            }
        }
    }

    fn attn_update<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        hh: &AttnHandles,
        ctx: &BlockCtx<T>,
        groups: usize,
        len: usize,
    ) -> Result<Var> {
        let gain = tape.param(store, hh.norm_gain);
        let bias = tape.param(store, hh.norm_bias);
        let u = tape.layer_norm(y, gain, bias, 1e-5)?;
        let wq = tape.param(store, hh.wq);
        let wk = tape.param(store, hh.wk);
        let wv = tape.param(store, hh.wv);
        let bq = tape.param(store, hh.bq);
        let bk = tape.param(store, hh.bk);
        let bv = tape.param(store, hh.bv);
        let q = tape.matmul_bias(u, wq, bq)?;
        let k = tape.matmul_bias(u, wk, bk)?;
        let v = tape.matmul_bias(u, wv, bv)?;
        let attn = tape.attention(q, k, v, groups, len, ctx.heads)?;
        let wo = tape.param(store, hh.wo);
        let bo = tape.param(store, hh.bo);
        let proj = tape.matmul_bias(attn, wo, bo)?;
        Ok(tape.dropout(proj, ctx.dropout))
    }

    /// Attention sublayer: the standard residual update, or its PDE
    /// discretization `y <- y + h (F(y) - y)` with the attention matrix
    /// recomputed from the current state each Euler step.
    fn attn_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y0: Var,
        hh: &AttnHandles,
        ctx: &BlockCtx<T>,
        groups: usize,
        len: usize,
    ) -> Result<Var> {
        if !ctx.pde_enabled {
            let f = self.attn_update(tape, store, y0, hh, ctx, groups, len)?;
            return tape.add(y0, f);
        }
        let h = T::from_f64(ctx.pde_h);
        let mut y = y0;
        for _ in 0..ctx.pde_steps {
            let f = self.attn_update(tape, store, y, hh, ctx, groups, len)?;
            let y_plus_hf = tape.add_scaled(y, f, h)?;
            y = tape.add_scaled(y_plus_hf, y, T::ZERO - h)?;
        }
        Ok(y)
    }

    fn mlp_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        hh: &MlpHandles,
        ctx: &BlockCtx<T>,
    ) -> Result<Var> {
        let gain = tape.param(store, hh.norm_gain);
        let bias = tape.param(store, hh.norm_bias);
        let u = tape.layer_norm(y, gain, bias, 1e-5)?;
        let w1 = tape.param(store, hh.w1);
        let b1 = tape.param(store, hh.b1);
        let mut z = tape.matmul_bias(u, w1, b1)?;
        z = tape.gelu(z);
        let w2 = tape.param(store, hh.w2);
        let b2 = tape.param(store, hh.b2);
        let mut out = tape.matmul_bias(z, w2, b2)?;
        out = tape.dropout(out, ctx.dropout);
        tape.add(y, out)
    }

    fn gcn_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        hh: &GcnHandles,
        adj: Adjacency<T>,
        groups: usize,
        len: usize,
        ctx: &BlockCtx<T>,
    ) -> Result<Var> {
        let gain = tape.param(store, hh.norm_gain);
        let bias = tape.param(store, hh.norm_bias);
        let u = tape.layer_norm(y, gain, bias, 1e-5)?;
        let agg = tape.adj_aggregate(u, adj, groups, len)?;
        let w = tape.param(store, hh.w);
        let b = tape.param(store, hh.b);
        let mut z = tape.matmul_bias(agg, w, b)?;
        z = tape.gelu(z);
        z = tape.dropout(z, ctx.dropout);
        tape.add(y, z)
    }

    /// Temporal GCN over the similarity-KNN graph of the current features,
    /// built per joint trajectory. The graph construction is discrete, so
    /// gradients flow through the aggregation only.
    fn temporal_gcn_sublayer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Var,
        hh: &GcnHandles,
        ctx: &BlockCtx<T>,
    ) -> Result<Var> {
        let gain = tape.param(store, hh.norm_gain);
        let bias = tape.param(store, hh.norm_bias);
        let u = tape.layer_norm(y, gain, bias, 1e-5)?;
        let groups = ctx.batch * ctx.joints;
        let adjs = knn_group_adjacencies(tape.value(u), groups, ctx.frames, ctx.k)?;
        let agg = tape.adj_aggregate(u, Adjacency::PerGroup(Arc::new(adjs)), groups, ctx.frames)?;
        let w = tape.param(store, hh.w);
        let b = tape.param(store, hh.b);
        let mut z = tape.matmul_bias(agg, w, b)?;
        z = tape.gelu(z);
        z = tape.dropout(z, ctx.dropout);
        tape.add(y, z)
    }
}

/// One dual-stream fusion block applied to a batched state outside the full
/// model, e.g. for block-level verification.
pub fn dual_block<T: Scalar>(
    state: &DualStreamState<T>,
    backbone: &Backbone,
    block_index: usize,
    store: &ParamStore<T>,
    mode: Mode,
) -> Result<DualStreamState<T>> {
    if block_index >= backbone.handles.blocks.len() {
        return Err(Error::Config(format!("block index {} out of range", block_index)));
    }
    if state.frames != backbone.cfg.frames || state.joints != backbone.cfg.joints || state.d() != backbone.cfg.d {
        return Err(Error::Dimension("state geometry does not match the backbone config".into()));
    }
    let mut tape = Tape::new(mode);
    let x = tape.constant(state.features.clone());
    let ctx = backbone.ctx::<T>(state.batch);
    let bh = backbone.handles.blocks[block_index];
    let out = backbone.dual_block_on_tape(&mut tape, store, x, &bh, &ctx)?;
    DualStreamState::new(tape.value(out).clone(), state.batch, state.frames, state.joints)
}

/// Evaluation-mode forward for a single sample, in domain types. Inputs
/// are embedded as given; the caller keeps units consistent with training.
pub fn backbone_forward<T: Scalar>(
    x2d: &JointSequence2D,
    y_noisy: &JointSequence3D,
    t: usize,
    store: &ParamStore<T>,
    backbone: &Backbone,
) -> Result<JointSequence3D> {
    let cfg = backbone.cfg();
    if x2d.frames() != cfg.frames || x2d.joints() != cfg.joints {
        return Err(Error::Dimension(format!(
            "2D sequence is {}x{}, config expects {}x{}",
            x2d.frames(),
            x2d.joints(),
            cfg.frames,
            cfg.joints
        )));
    }
    if y_noisy.frames() != cfg.frames || y_noisy.joints() != cfg.joints {
        return Err(Error::Dimension("noisy 3D sequence does not match config geometry".into()));
    }
    let rows = cfg.frames * cfg.joints;
    let x_t = Tensor::<T>::from_f64_slice(vec![rows, 2], x2d.coords())?;
    let y_t = Tensor::<T>::from_f64_slice(vec![rows, 3], y_noisy.coords())?;
    let input = ForwardInput::assemble(cfg, &[&x_t], &[&y_t], &[t])?;
    let mut tape = Tape::new(Mode::Eval);
    let out = backbone.forward_on_tape(&mut tape, store, &input)?;
    let coords: Vec<f64> = tape.value(out).data().iter().map(|v| v.to_f64()).collect();
    JointSequence3D::new(cfg.frames, cfg.joints, coords)
}

/// An immutable (backbone, parameters) pair usable as a diffusion denoiser.
pub struct BackboneDenoiser<'a, T: Scalar> {
    pub backbone: &'a Backbone,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Denoiser<T> for BackboneDenoiser<'a, T> {
    fn denoise(&self, x2d: &Tensor<T>, y_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let input = ForwardInput::assemble(self.backbone.cfg(), &[x2d], &[y_t], &[t])?;
        let mut tape = Tape::new(Mode::Eval);
        let out = self.backbone.forward_on_tape(&mut tape, self.store, &input)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualstream::config::StreamMode;
    use crate::numerics::grad_check;
    use crate::pde::PdeConfig;
    use crate::skeleton::human_topology;
    use rand_distr::{Distribution, StandardNormal};

    fn micro_cfg() -> BackboneConfig {
        BackboneConfig {
            d: 8,
            d_prime: 16,
            depth: 1,
            heads: 2,
            k_neighbors: 3,
            mlp_ratio: 3,
            dropout: 0.0,
            frames: 4,
            joints: 5,
            pde: PdeConfig::default(),
            stream_mode: StreamMode::Parallel,
        }
    }

    fn micro_topology() -> SkeletonTopology {
        SkeletonTopology::new(5, vec![(0, 1), (1, 2), (0, 3), (3, 4)], vec![(1, 3), (2, 4)], 0).unwrap()
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn micro_backbone(cfg: BackboneConfig, seed: u64) -> (Backbone, ParamStore<f64>) {
        let (store, handles) = init_params::<f64>(&cfg, seed).unwrap();
        let topo = micro_topology();
        (Backbone::new(cfg, &topo, handles).unwrap(), store)
    }

    #[test]
    fn forward_output_shape_matches_contract() {
        let cfg = BackboneConfig {
            frames: 27,
            joints: 17,
            d: 16,
            d_prime: 32,
            depth: 1,
            heads: 2,
            ..micro_cfg()
        };
        let (store, handles) = init_params::<f64>(&cfg, 3).unwrap();
        let backbone = Backbone::new(cfg, &human_topology(), handles).unwrap();
        let rows = 27 * 17;
        let x2d = rand_tensor(vec![rows, 2], 1);
        let y = rand_tensor(vec![rows, 3], 2);
        let input = ForwardInput::assemble(backbone.cfg(), &[&x2d], &[&y], &[500]).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let out = backbone.forward_on_tape(&mut tape, &store, &input).unwrap();
        assert_eq!(tape.value(out).shape(), &[rows, 3]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn eval_mode_is_bit_deterministic() {
        let (backbone, store) = micro_backbone(micro_cfg(), 7);
        let rows = 4 * 5;
        let x2d = rand_tensor(vec![rows, 2], 4);
        let y = rand_tensor(vec![rows, 3], 5);
        let run = || {
            let input = ForwardInput::assemble(backbone.cfg(), &[&x2d], &[&y], &[123]).unwrap();
            let mut tape = Tape::new(Mode::Eval);
            let out = backbone.forward_on_tape(&mut tape, &store, &input).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroed_block_with_standard_residuals_is_identity() {
        let mut cfg = micro_cfg();
        cfg.pde.enabled = false;
        let (backbone, mut store) = micro_backbone(cfg, 9);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.tensor_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let state = DualStreamState::new(rand_tensor(vec![2 * 4 * 5, 8], 6), 2, 4, 5).unwrap();
        let out = dual_block(&state, &backbone, 0, &store, Mode::Eval).unwrap();
        assert!(out.features.max_abs_diff(&state.features) < 1e-12);
    }

    #[test]
    fn block_preserves_shape_for_any_config() {
        for (pde_on, mode) in [
            (true, StreamMode::Parallel),
            (false, StreamMode::Parallel),
            (true, StreamMode::TransformerOnly),
            (true, StreamMode::GcnOnly),
        ] {
            let mut cfg = micro_cfg();
            cfg.pde.enabled = pde_on;
            cfg.stream_mode = mode;
            let (backbone, store) = micro_backbone(cfg, 11);
            let state = DualStreamState::new(rand_tensor(vec![3 * 4 * 5, 8], 7), 3, 4, 5).unwrap();
            let out = dual_block(&state, &backbone, 0, &store, Mode::Eval).unwrap();
            assert_eq!(out.features.shape(), state.features.shape());
        }
    }

    #[test]
    fn parallel_block_decomposes_into_stream_sum_when_fusion_is_zero() {
        // with zero fusion logits the block output is the elementwise mean
        // of the two stream outputs; forcing one stream to the identity by
        // zeroing its weights exposes each stream, so
        // block(x) = A + B - x with A/B the single-stream-hacked runs
        let mut cfg = micro_cfg();
        cfg.pde.enabled = false;
        let (backbone, mut store) = micro_backbone(cfg, 13);
        // the block adds its positional tables to the shared input; zero
        // them so the identity-residual algebra below is exact in x
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".pos.") {
                for v in store.tensor_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let store = store;
        let state = DualStreamState::new(rand_tensor(vec![4 * 5, 8], 8), 1, 4, 5).unwrap();

        let zero_prefixed = |store: &ParamStore<f64>, prefixes: &[&str]| {
            let mut s = store.convert::<f64>();
            for id in s.ids().collect::<Vec<_>>() {
                let name = s.name(id).to_string();
                if prefixes.iter().any(|p| name.contains(p)) {
                    for v in s.tensor_mut(id).data_mut() {
                        *v = 0.0;
                    }
                }
            }
            s
        };

        let gcn_zeroed = zero_prefixed(&store, &[".g.sgcn", ".g.tgcn"]);
        let t_zeroed = zero_prefixed(&store, &[".t.sattn", ".t.smlp", ".t.tattn", ".t.tmlp"]);

        let full = dual_block(&state, &backbone, 0, &store, Mode::Eval).unwrap();
        let a = dual_block(&state, &backbone, 0, &gcn_zeroed, Mode::Eval).unwrap(); // 0.5 t + 0.5 x
        let b = dual_block(&state, &backbone, 0, &t_zeroed, Mode::Eval).unwrap(); // 0.5 x + 0.5 g
        let reconstructed = a.features.add(&b.features).unwrap().sub(&state.features).unwrap();
        assert!(full.features.max_abs_diff(&reconstructed) < 1e-9);
    }

    #[test]
    fn block_gradient_check() {
        // micro geometry with k = frames - 1 keeps the KNN graph complete,
        // so central differences see a smooth function
        let mut cfg = micro_cfg();
        cfg.pde.enabled = false;
        let (backbone, mut store) = micro_backbone(cfg, 17);
        let features = rand_tensor(vec![4 * 5, 8], 9);
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let x = tape.constant(features.clone());
            let ctx = backbone.ctx::<f64>(1);
            let out = backbone.dual_block_on_tape(tape, store, x, &backbone.handles.blocks[0], &ctx)?;
            Ok(tape.row_l2_mean(out))
        })
        .unwrap();
        assert!(err < 1e-3, "block rel error {}", err);
    }

    #[test]
    fn block_gradient_check_with_pde_attention() {
        let mut cfg = micro_cfg();
        cfg.pde.enabled = true;
        cfg.pde.steps = 2;
        let (backbone, mut store) = micro_backbone(cfg, 19);
        let features = rand_tensor(vec![4 * 5, 8], 10);
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let x = tape.constant(features.clone());
            let ctx = backbone.ctx::<f64>(1);
            let out = backbone.dual_block_on_tape(tape, store, x, &backbone.handles.blocks[0], &ctx)?;
            Ok(tape.row_l2_mean(out))
        })
        .unwrap();
        assert!(err < 1e-3, "pde block rel error {}", err);
    }

    #[test]
    fn full_model_gradient_check_micro_config() {
        let (backbone, mut store) = micro_backbone(micro_cfg(), 21);
        let rows = 4 * 5;
        let x2d = rand_tensor(vec![rows, 2], 11);
        let y_noisy = rand_tensor(vec![rows, 3], 12);
        let target = rand_tensor(vec![rows, 3], 13);
        let err = grad_check(&mut store, 1e-4, |tape, store| {
            let input = ForwardInput::assemble(backbone.cfg(), &[&x2d], &[&y_noisy], &[37])?;
            let out = backbone.forward_on_tape(tape, store, &input)?;
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(out, tgt)?;
            Ok(tape.row_l2_mean(diff))
        })
        .unwrap();
        assert!(err < 1e-3, "full model rel error {}", err);
    }

    #[test]
    fn attention_rows_stay_stochastic_through_the_model() {
        let (backbone, store) = micro_backbone(micro_cfg(), 23);
        let rows = 4 * 5;
        let x2d = rand_tensor(vec![rows, 2], 14);
        let y = rand_tensor(vec![rows, 3], 15);
        let input = ForwardInput::assemble(backbone.cfg(), &[&x2d], &[&y], &[7]).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        backbone.forward_on_tape(&mut tape, &store, &input).unwrap();
        let sums = tape.attention_row_sums();
        assert!(!sums.is_empty());
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn micro_param_count_matches_hand_enumeration() {
        let cfg = micro_cfg();
        // embed (5+8)*8+8; global pos (4+5)*8; per block:
        //   2 attn: 2*(4*64+4*8); 2 mlp (hidden 24): 2*(8*24+24+24*8+8);
        //   2 gcn: 2*(64+8); fuse 8*4+8*2; 6 norms: 6*16; block pos (4+5)*8
        // head: norm 16 + expand 8*16+16 + out 16*3+3
        let embed = (5 + 2) * 8 + 8;
        let pos = 9 * 8;
        let block = 2 * (4 * 64 + 4 * 8) + 2 * (8 * 24 + 24 + 24 * 8 + 8) + 2 * (64 + 8) + (8 * 4 + 8 * 2) + 6 * 16 + 9 * 8;
        let head = 16 + (8 * 16 + 16) + (16 * 3 + 3);
        let want = embed + pos + block + head;
        assert_eq!(param_count(&cfg).unwrap(), want);
    }

    #[test]
    fn param_count_reporting_config() {
        // the d=128 / d'=512 / depth-8 / 243-frame configuration
        let cfg = BackboneConfig::default();
        let count = param_count(&cfg).unwrap();
        assert_eq!(count, 3_292_675);
    }

    #[test]
    fn doubling_depth_doubles_block_subtotal() {
        let mut cfg = micro_cfg();
        let c1 = param_count(&cfg).unwrap();
        cfg.depth = 2;
        let c2 = param_count(&cfg).unwrap();
        let non_block = {
            let embed = (5 + 2) * 8 + 8;
            let pos = 9 * 8;
            let head = 16 + (8 * 16 + 16) + (16 * 3 + 3);
            embed + pos + head
        };
        assert_eq!(c2 - non_block, 2 * (c1 - non_block));
    }

    #[test]
    fn backbone_forward_domain_wrapper() {
        let cfg = BackboneConfig { frames: 6, joints: 17, d: 8, d_prime: 16, depth: 1, heads: 2, ..micro_cfg() };
        let (store, handles) = init_params::<f64>(&cfg, 29).unwrap();
        let backbone = Backbone::new(cfg, &human_topology(), handles).unwrap();
        let x2d = JointSequence2D::new(6, 17, rand_tensor(vec![6 * 17 * 2], 16).into_data()).unwrap();
        let y = JointSequence3D::new(6, 17, rand_tensor(vec![6 * 17 * 3], 17).into_data()).unwrap();
        let out = backbone_forward(&x2d, &y, 50, &store, &backbone).unwrap();
        assert_eq!(out.frames(), 6);
        assert_eq!(out.joints(), 17);
        // mismatched geometry is a dimension error
        let bad = JointSequence2D::zeros(3, 17);
        assert!(matches!(
            backbone_forward(&bad, &y, 50, &store, &backbone),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn resolve_handles_round_trip() {
        let cfg = micro_cfg();
        let (store, handles) = init_params::<f64>(&cfg, 31).unwrap();
        let resolved = resolve_handles(&store, &cfg).unwrap();
        assert_eq!(handles.embed_w, resolved.embed_w);
        assert_eq!(handles.blocks.len(), resolved.blocks.len());
        assert_eq!(handles.head_out_b, resolved.head_out_b);
    }

    #[test]
    fn timestep_embedding_has_unit_pairs() {
        let emb = timestep_embedding::<f64>(250, 8);
        for i in 0..4 {
            let s = emb[i];
            let c = emb[4 + i];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
        assert_ne!(timestep_embedding::<f64>(1, 8), timestep_embedding::<f64>(2, 8));
    }
}
