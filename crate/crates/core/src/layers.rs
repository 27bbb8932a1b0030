// SPDX-License-Identifier: MIT OR Apache-2.0

//! Building blocks shared by the toy language models and the translator.

use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, Initializer, ParamSet};
use crate::tensor::Element;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers `{prefix}.weight` (in × out) and `{prefix}.bias`.
pub(crate) fn init_linear(
    params: &mut ParamSet,
    init: &mut Initializer,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    params.insert(format!("{prefix}.weight"), init.xavier(fan_in, fan_out));
    params.insert(format!("{prefix}.bias"), init.zeros(fan_out));
}

/// Registers `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
pub(crate) fn init_norm(params: &mut ParamSet, init: &Initializer, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gamma"), init.ones(width));
    params.insert(format!("{prefix}.beta"), init.zeros(width));
}

/// Registers the four projections of a multi-head attention block.
pub(crate) fn init_attention(
    params: &mut ParamSet,
    init: &mut Initializer,
    prefix: &str,
    width: usize,
) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, init, &format!("{prefix}.{proj}"), width, width);
    }
}

pub(crate) fn linear<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.mul_row(n, gamma)?;
    g.add_row(s, beta)
}

/// Multi-head self-attention over the rows of `x`. `keep` is the row-major
/// `rows × rows` mask of allowed (query, key) pairs.
pub(crate) fn attention<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    n_heads: usize,
    keep: &Arc<[bool]>,
) -> Result<Var> {
    let width = g.value(x).cols();
    let head = width / n_heads;
    let scale = 1.0 / (head as f64).sqrt();
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head, head)?;
        let kh = g.slice_cols(k, h * head, head)?;
        let vh = g.slice_cols(v, h * head, head)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.mask(scores, keep.clone())?;
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    linear(g, p, &format!("{prefix}.o"), merged)
}

/// Lower-triangular mask: query `i` may attend to keys `0..=i`.
pub(crate) fn causal_mask(len: usize) -> Arc<[bool]> {
    (0..len * len).map(|ix| ix % len <= ix / len).collect()
}

/// Block-diagonal mask: rows attend only within their own block of `block` rows.
pub(crate) fn block_mask(blocks: usize, block: usize) -> Arc<[bool]> {
    let n = blocks * block;
    (0..n * n)
        .map(|ix| ix / n / block == ix % n / block)
        .collect()
}
