//! Parameter initialisers and the classical residual block.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Binder, ModelParams};
use crate::error::Result;

/// Group count for every normalization layer; all widths are multiples of 3.
pub const NORM_GROUPS: usize = 3;

pub const INIT_STD: f64 = 0.02;

pub fn init_conv<R: Rng + ?Sized>(
    params: &mut ModelParams,
    path: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) {
    params.init_truncated_normal(format!("{path}.w"), &[k, k, cin, cout], INIT_STD, rng);
    params.init_const(format!("{path}.b"), &[cout], 0.0);
}

pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ModelParams,
    path: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    params.init_truncated_normal(format!("{path}.w"), &[din, dout], INIT_STD, rng);
    params.init_const(format!("{path}.b"), &[dout], 0.0);
}

pub fn init_norm(params: &mut ModelParams, path: &str, c: usize) {
    params.init_const(format!("{path}.gamma"), &[c], 1.0);
    params.init_const(format!("{path}.beta"), &[c], 0.0);
}

pub fn conv(g: &mut Graph, b: &mut Binder, path: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{path}.w"))?;
    let bias = b.var(g, &format!("{path}.b"))?;
    g.conv2d(x, w, bias)
}

pub fn linear(g: &mut Graph, b: &mut Binder, path: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{path}.w"))?;
    let bias = b.var(g, &format!("{path}.b"))?;
    g.linear(x, w, bias)
}

pub fn norm(g: &mut Graph, b: &mut Binder, path: &str, x: Var) -> Result<Var> {
    let gamma = b.var(g, &format!("{path}.gamma"))?;
    let beta = b.var(g, &format!("{path}.beta"))?;
    g.group_norm(x, gamma, beta, NORM_GROUPS)
}

/// Which parts of a residual block to create.
#[derive(Debug, Clone, Copy)]
pub struct ResBlockShape {
    pub cin: usize,
    pub cout: usize,
    pub emb_dim: usize,
    /// `false` when the first convolution is replaced by another op.
    pub conv1: bool,
}

/// Parameters of a residual block under `prefix`:
/// `norm1, conv1, emb, norm2, conv2` and a 1×1 `skip` when widths differ.
pub fn init_res_block<R: Rng + ?Sized>(
    params: &mut ModelParams,
    prefix: &str,
    shape: ResBlockShape,
    rng: &mut R,
) {
    let ResBlockShape {
        cin,
        cout,
        emb_dim,
        conv1,
    } = shape;
    init_norm(params, &format!("{prefix}.norm1"), cin);
    if conv1 {
        init_conv(params, &format!("{prefix}.conv1"), 3, cin, cout, rng);
    }
    init_linear(params, &format!("{prefix}.emb"), emb_dim, cout, rng);
    init_norm(params, &format!("{prefix}.norm2"), cout);
    init_conv(params, &format!("{prefix}.conv2"), 3, cout, cout, rng);
    if cin != cout {
        init_conv(params, &format!("{prefix}.skip"), 1, cin, cout, rng);
    }
}

/// `out = skip(x) + conv2(silu(norm2(first(silu(norm1(x))) + emb_shift)))`,
/// where `emb_act` is the already activated conditioning vector `[B, E]`.
pub fn res_block_with(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    emb_act: Var,
    first: impl FnOnce(&mut Graph, &mut Binder, Var) -> Result<Var>,
) -> Result<Var> {
    let h = norm(g, b, &format!("{prefix}.norm1"), x)?;
    let h = g.silu(h);
    let h = first(g, b, h)?;
    let shift = linear(g, b, &format!("{prefix}.emb"), emb_act)?;
    let h = g.add_channels(h, shift)?;
    let h = norm(g, b, &format!("{prefix}.norm2"), h)?;
    let h = g.silu(h);
    let h = conv(g, b, &format!("{prefix}.conv2"), h)?;
    let skip_path = format!("{prefix}.skip");
    let skip = if b.params().contains(&format!("{skip_path}.w")) {
        conv(g, b, &skip_path, x)?
    } else {
        x
    };
    g.add(h, skip)
}

/// The classical residual block.
pub fn res_block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, emb_act: Var) -> Result<Var> {
    let conv1 = format!("{prefix}.conv1");
    res_block_with(g, b, prefix, x, emb_act, |g, b, h| conv(g, b, &conv1, h))
}
