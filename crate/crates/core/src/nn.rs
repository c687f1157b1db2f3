//! Pre-LayerNorm transformer blocks built on the autodiff graph.
//!
//! Parameters live in a [`ParamStore`] under dotted names; the helpers here
//! create them and wire them into a [`Graph`] through a [`Binder`].

use rand::{Rng, RngCore};

use crate::numerics::{AttnMask, Binder, Graph, ParamStore, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Dropout settings and randomness for one forward pass.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub attn_dropout: f64,
    pub rng: &'r mut dyn RngCore,
}

impl<'r> Ctx<'r> {
    pub fn eval(rng: &'r mut dyn RngCore) -> Self {
        Self { dropout: 0.0, attn_dropout: 0.0, rng }
    }
}

/// Source of randomness for passes that never sample.
pub(crate) struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockDims {
    pub d: usize,
    pub ff: usize,
    /// Total residual layers in the stack, for output-projection scaling.
    pub depth: usize,
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), ParamStore::filled(&[d], 1.0));
    store.insert(format!("{prefix}.b"), ParamStore::filled(&[d], 0.0));
}

pub(crate) fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dims: BlockDims) {
    let std = 1.0 / (dims.d as f64).sqrt();
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{w}"), ParamStore::normal(rng, &[dims.d, dims.d], std));
    }
    let out_std = std / (2.0 * dims.depth as f64).sqrt();
    store.insert(format!("{prefix}.wo"), ParamStore::normal(rng, &[dims.d, dims.d], out_std));
}

pub(crate) fn init_ff<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dims: BlockDims) {
    let (d, ff) = (dims.d, dims.ff);
    store.insert(format!("{prefix}.w1"), ParamStore::normal(rng, &[d, ff], 1.0 / (d as f64).sqrt()));
    store.insert(format!("{prefix}.b1"), ParamStore::filled(&[ff], 0.0));
    let out_std = 1.0 / (ff as f64).sqrt() / (2.0 * dims.depth as f64).sqrt();
    store.insert(format!("{prefix}.w2"), ParamStore::normal(rng, &[ff, d], out_std));
    store.insert(format!("{prefix}.b2"), ParamStore::filled(&[d], 0.0));
}

/// Self-attention + feed-forward layer, optionally with cross-attention.
pub(crate) fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dims: BlockDims,
    cross: bool,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dims.d);
    init_attention(store, rng, &format!("{prefix}.self"), dims);
    if cross {
        init_layer_norm(store, &format!("{prefix}.ln_x"), dims.d);
        init_attention(store, rng, &format!("{prefix}.cross"), dims);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dims.d);
    init_ff(store, rng, &format!("{prefix}.ff"), dims);
}

pub(crate) fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let gamma = b.get(g, &format!("{prefix}.g"));
    let beta = b.get(g, &format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows, output-projected.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: AttnMask,
    ctx: &mut Ctx,
) -> Var {
    let wq = b.get(g, &format!("{prefix}.wq"));
    let wk = b.get(g, &format!("{prefix}.wk"));
    let wv = b.get(g, &format!("{prefix}.wv"));
    let wo = b.get(g, &format!("{prefix}.wo"));
    let q = g.matmul(q_in, wq);
    let k = g.matmul(kv_in, wk);
    let v = g.matmul(kv_in, wv);
    let a = g.attention(q, k, v, heads, mask, ctx.attn_dropout, &mut *ctx.rng);
    g.matmul(a, wo)
}

pub(crate) fn feed_forward(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let w1 = b.get(g, &format!("{prefix}.w1"));
    let b1 = b.get(g, &format!("{prefix}.b1"));
    let w2 = b.get(g, &format!("{prefix}.w2"));
    let b2 = b.get(g, &format!("{prefix}.b2"));
    let h = g.linear(x, w1, Some(b1));
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

pub(crate) fn residual(g: &mut Graph, x: Var, delta: Var, ctx: &mut Ctx) -> Var {
    let delta = g.dropout(delta, ctx.dropout, &mut *ctx.rng);
    g.add(x, delta)
}

/// Bidirectional encoder layer.
pub(crate) fn encoder_block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, heads: usize, ctx: &mut Ctx) -> Var {
    let xn = layer_norm(g, b, &format!("{prefix}.ln1"), x);
    let a = attention(g, b, &format!("{prefix}.self"), xn, xn, heads, AttnMask::None, ctx);
    let x = residual(g, x, a, ctx);
    let xn = layer_norm(g, b, &format!("{prefix}.ln2"), x);
    let f = feed_forward(g, b, &format!("{prefix}.ff"), xn);
    residual(g, x, f, ctx)
}

/// Token plus learned absolute position embeddings.
pub(crate) fn embed(
    g: &mut Graph,
    b: &mut Binder,
    tok_table: &str,
    pos_table: &str,
    ids: &[usize],
    ctx: &mut Ctx,
) -> Var {
    let tok = b.get(g, tok_table);
    let pos = b.get(g, pos_table);
    let x = g.gather_rows(tok, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = g.gather_rows(pos, &positions);
    let x = g.add(x, p);
    g.dropout(x, ctx.dropout, &mut *ctx.rng)
}
