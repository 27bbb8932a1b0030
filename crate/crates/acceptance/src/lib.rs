// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test support for the latent-bridge acceptance suite.
//!
//! [`OpProbe`] enumerates every differentiable graph op, the composite
//! layers built from them, the translator forward pass and the four loss
//! components, each as a [`Probe`] that finite-difference checking can
//! drive at random points.

use std::sync::Arc;

use latent_bridge::gradcheck::{grad_check, Probe};
use latent_bridge::losses::{cycle_terms, info_nce, moment_match, mse};
use latent_bridge::translator::{init_translator, TranslatorConfig, TranslatorParams};
use latent_bridge::{Element, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Temperature used by the contrastive probe.
pub const PROBE_TEMPERATURE: f64 = 0.07;

/// One checkable computation.
#[derive(Clone, Debug)]
pub enum OpProbe {
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    MatMul,
    Transpose,
    Scale,
    AddScalar,
    Gelu,
    Sqrt,
    Square,
    Softmax,
    LayerNorm,
    L2Normalize,
    MaskedSoftmax,
    SliceCols,
    ConcatCols,
    Reshape,
    Gather,
    Sum,
    Mean,
    MeanRows,
    CrossEntropy,
    Linear,
    Attention,
    Translate(TranslatorParams),
    LossTrans,
    LossCycle(TranslatorParams, TranslatorParams),
    LossContrast,
    LossDist,
}

fn small_translator(d_src: usize, d_tgt: usize, seed: u64) -> TranslatorParams {
    init_translator(&TranslatorConfig {
        d_src,
        d_tgt,
        d_hidden: 8,
        n_heads: 2,
        n_slots: 3,
        seed,
    })
    .expect("valid probe translator")
}

impl OpProbe {
    /// Every probe, in a fixed order.
    pub fn all() -> Vec<OpProbe> {
        use OpProbe::*;
        vec![
            Add,
            Sub,
            Mul,
            AddRow,
            MulRow,
            MatMul,
            Transpose,
            Scale,
            AddScalar,
            Gelu,
            Sqrt,
            Square,
            Softmax,
            LayerNorm,
            L2Normalize,
            MaskedSoftmax,
            SliceCols,
            ConcatCols,
            Reshape,
            Gather,
            Sum,
            Mean,
            MeanRows,
            CrossEntropy,
            Linear,
            Attention,
            Translate(small_translator(6, 5, 21)),
            LossTrans,
            LossCycle(small_translator(6, 5, 31), small_translator(5, 6, 32)),
            LossContrast,
            LossDist,
        ]
    }

    pub fn name(&self) -> &'static str {
        use OpProbe::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            AddRow => "add_row",
            MulRow => "mul_row",
            MatMul => "matmul",
            Transpose => "transpose",
            Scale => "scale",
            AddScalar => "add_scalar",
            Gelu => "gelu",
            Sqrt => "sqrt",
            Square => "square",
            Softmax => "softmax",
            LayerNorm => "layer_norm",
            L2Normalize => "l2_normalize",
            MaskedSoftmax => "mask+softmax",
            SliceCols => "slice_cols",
            ConcatCols => "concat_cols",
            Reshape => "reshape",
            Gather => "gather",
            Sum => "sum",
            Mean => "mean",
            MeanRows => "mean_rows",
            CrossEntropy => "cross_entropy",
            Linear => "linear layer",
            Attention => "causal attention",
            Translate(_) => "translate",
            LossTrans => "loss_trans",
            LossCycle(..) => "loss_cycle",
            LossContrast => "loss_contrast",
            LossDist => "loss_dist",
        }
    }

    /// Shape of the perturbed input.
    pub fn input_shape(&self) -> [usize; 2] {
        use OpProbe::*;
        match self {
            Add | Sub | Mul => [1, 24],
            AddRow | MulRow => [1, 16],
            MatMul => [1, 20],
            MaskedSoftmax => [4, 4],
            SliceCols | ConcatCols | LayerNorm => [3, 6],
            Reshape => [2, 6],
            Gather => [5, 3],
            CrossEntropy => [4, 5],
            Attention => [4, 6],
            Translate(_) => [2, 6],
            LossCycle(..) => [3, 6],
            LossContrast => [3, 5],
            LossDist => [4, 5],
            _ => [3, 4],
        }
    }

    /// A random input of the right shape and range.
    pub fn random_point(&self, rng: &mut impl Rng) -> Tensor {
        let [r, c] = self.input_shape();
        let (lo, hi) = match self {
            OpProbe::Sqrt => (0.5, 2.0),
            _ => (-1.0, 1.0),
        };
        let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(vec![r, c], data).expect("sized")
    }
}

/// A constant tensor that is identical on every evaluation and in every precision.
fn konst<T: Element>(g: &mut Graph<T>, seed: u64, rows: usize, cols: usize) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| T::from_f32(rng.random_range(-1.0f32..1.0)))
        .collect();
    g.constant(Tensor::new(vec![rows, cols], data).expect("sized"))
}

fn split<T: Element>(g: &mut Graph<T>, x: Var, parts: &[(usize, usize)]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(parts.len());
    let mut start = 0;
    for &(r, c) in parts {
        let s = g.slice_cols(x, start, r * c)?;
        out.push(g.reshape(s, &[r, c])?);
        start += r * c;
    }
    Ok(out)
}

fn causal(len: usize) -> Arc<[bool]> {
    (0..len * len).map(|ix| ix % len <= ix / len).collect()
}

fn attention<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, width) = g.value(x).dims2().expect("matrix");
    let heads = 2;
    let head = width / heads;
    let wq = konst(g, 101, width, width);
    let wk = konst(g, 102, width, width);
    let wv = konst(g, 103, width, width);
    let wo = konst(g, 104, width, width);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head, head)?;
        let kh = g.slice_cols(k, h * head, head)?;
        let vh = g.slice_cols(v, h * head, head)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (head as f64).sqrt())?;
        let s = g.mask(s, causal(n))?;
        let w = g.softmax(s)?;
        outs.push(g.matmul(w, vh)?);
    }
    let merged = g.concat_cols(&outs)?;
    g.matmul(merged, wo)
}

impl Probe for OpProbe {
    fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        use OpProbe::*;
        match self {
            Add | Sub | Mul => {
                let v = split(g, x, &[(3, 4), (3, 4)])?;
                match self {
                    Add => g.add(v[0], v[1]),
                    Sub => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }
            }
            AddRow | MulRow => {
                let v = split(g, x, &[(3, 4), (1, 4)])?;
                if matches!(self, AddRow) {
                    g.add_row(v[0], v[1])
                } else {
                    g.mul_row(v[0], v[1])
                }
            }
            MatMul => {
                let v = split(g, x, &[(3, 4), (4, 2)])?;
                g.matmul(v[0], v[1])
            }
            Transpose => g.transpose(x),
            Scale => g.scale(x, -2.5),
            AddScalar => g.add_scalar(x, 0.7),
            Gelu => g.gelu(x),
            Sqrt => g.sqrt(x),
            Square => g.square(x),
            Softmax => g.softmax(x),
            LayerNorm => g.layer_norm(x, 1e-5),
            L2Normalize => g.l2_normalize(x),
            MaskedSoftmax => {
                let m = g.mask(x, causal(4))?;
                g.softmax(m)
            }
            SliceCols => g.slice_cols(x, 2, 3),
            ConcatCols => {
                let a = g.slice_cols(x, 0, 2)?;
                let b = g.slice_cols(x, 2, 4)?;
                g.concat_cols(&[b, a])
            }
            Reshape => g.reshape(x, &[3, 4]),
            Gather => g.gather(x, &[0, 2, 2, 4]),
            Sum => g.sum(x),
            Mean => g.mean(x),
            MeanRows => g.mean_rows(x),
            CrossEntropy => g.cross_entropy(x, &[1, 0, 4, 2]),
            Linear => {
                let w = konst(g, 201, 4, 5);
                let b = konst(g, 202, 1, 5);
                let y = g.matmul(x, w)?;
                g.add_row(y, b)
            }
            Attention => attention(g, x),
            Translate(t) => {
                let p = t.params().attach(g, false);
                t.forward_graph(g, &p, x)
            }
            LossTrans => {
                let t = konst(g, 301, 3, 4);
                mse(g, x, t)
            }
            LossCycle(f, r) => {
                let pf = f.params().attach(g, false);
                let pr = r.params().attach(g, false);
                let tgt = konst(g, 302, 3, 5);
                let (a, b) = cycle_terms(g, (f, &pf), (r, &pr), x, tgt)?;
                g.add(a, b)
            }
            LossContrast => {
                let t = konst(g, 303, 3, 5);
                info_nce(g, x, t, PROBE_TEMPERATURE)
            }
            LossDist => {
                let t = konst(g, 304, 4, 5);
                moment_match(g, x, t)
            }
        }
    }
}

/// Worst relative error of `probe` over `points` seeded random inputs.
pub fn check_probe(probe: &OpProbe, points: usize, eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x = probe.random_point(&mut rng);
        worst = worst.max(grad_check(probe, &x, eps)?);
    }
    Ok(worst)
}
