// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training objective for the translator.
//!
//! Each component has a graph form (differentiable, generic over the element
//! type) and a convenience form that evaluates it on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, Result};
use crate::graph::{Graph, Var};
use crate::params::Bound;
use crate::tensor::{Element, Tensor};
use crate::translator::{check_chain, TranslatorParams};

/// Variance floor inside the standard deviation of [`moment_match`].
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_trans: f64,
    pub w_cycle: f64,
    pub w_contrast: f64,
    pub w_dist: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_trans: 1.0,
            w_cycle: 0.5,
            w_contrast: 0.3,
            w_dist: 0.2,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_trans, self.w_cycle, self.w_contrast, self.w_dist];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BridgeError::Config(format!(
                "loss weights must be finite and non-negative, got {ws:?}"
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(BridgeError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The four component values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub trans: f64,
    pub cycle: f64,
    pub contrast: f64,
    pub dist: f64,
}

/// Weighted sum of the four components.
pub fn composite(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let parts = [c.trans, c.cycle, c.contrast, c.dist];
    if parts.iter().any(|x| !x.is_finite()) {
        return Err(BridgeError::NonFinite { op: "composite" });
    }
    Ok(w.w_trans * c.trans + w.w_cycle * c.cycle + w.w_contrast * c.contrast + w.w_dist * c.dist)
}

fn same_shape<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(BridgeError::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean over every element of `(pred − target)²`.
pub fn mse<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, "loss_trans", pred, target)?;
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Squared Euclidean reconstruction error per row, averaged over rows.
pub fn reconstruction<T: Element>(g: &mut Graph<T>, recon: Var, original: Var) -> Result<Var> {
    same_shape(g, "loss_cycle", recon, original)?;
    let rows = g.value(original).rows();
    let d = g.sub(recon, original)?;
    let sq = g.square(d)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / rows as f64)
}

/// Symmetric in-batch InfoNCE over cosine similarities: row `i` of `pred`
/// should pick row `i` of `target` and vice versa.
pub fn info_nce<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    temperature: f64,
) -> Result<Var> {
    same_shape(g, "loss_contrast", pred, target)?;
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(BridgeError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = g.value(pred).rows();
    let p = g.l2_normalize(pred)?;
    let t = g.l2_normalize(target)?;
    let tt = g.transpose(t)?;
    let sim = g.matmul(p, tt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let diagonal: Vec<usize> = (0..n).collect();
    let by_row = g.cross_entropy(logits, &diagonal)?;
    let logits_t = g.transpose(logits)?;
    let by_col = g.cross_entropy(logits_t, &diagonal)?;
    let both = g.add(by_row, by_col)?;
    g.scale(both, 0.5)
}

/// Matches per-coordinate batch means and sample standard deviations.
pub fn moment_match<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, "loss_dist", pred, target)?;
    let n = g.value(pred).rows();
    if n < 2 {
        return Err(BridgeError::Input(format!(
            "loss_dist needs a batch of at least 2 rows, got {n}"
        )));
    }
    let (mp, sp) = moments(g, pred, n)?;
    let (mt, st) = moments(g, target, n)?;
    let dm = g.sub(mp, mt)?;
    let dm = g.square(dm)?;
    let mean_term = g.mean(dm)?;
    let ds = g.sub(sp, st)?;
    let ds = g.square(ds)?;
    let std_term = g.mean(ds)?;
    g.add(mean_term, std_term)
}

/// Per-column mean and sample standard deviation, both `1 × cols`.
fn moments<T: Element>(g: &mut Graph<T>, x: Var, n: usize) -> Result<(Var, Var)> {
    let mean = g.mean_rows(x)?;
    let neg = g.scale(mean, -1.0)?;
    let centered = g.add_row(x, neg)?;
    let sq = g.square(centered)?;
    let var = g.mean_rows(sq)?;
    let var = g.scale(var, n as f64 / (n - 1) as f64)?;
    let var = g.add_scalar(var, STD_EPS)?;
    let std = g.sqrt(var)?;
    Ok((mean, std))
}

/// Both halves of the cycle term on one graph: `g(f(src))` against `src`
/// and `f(g(tgt))` against `tgt`. Returns `(forward_half, reverse_half)`.
pub fn cycle_terms<T: Element>(
    graph: &mut Graph<T>,
    f: (&TranslatorParams, &Bound),
    g: (&TranslatorParams, &Bound),
    src: Var,
    tgt: Var,
) -> Result<(Var, Var)> {
    check_chain(f.0, g.0)?;
    let fx = f.0.forward_graph(graph, f.1, src)?;
    let gfx = g.0.forward_graph(graph, g.1, fx)?;
    let forward = reconstruction(graph, gfx, src)?;
    let gy = g.0.forward_graph(graph, g.1, tgt)?;
    let fgy = f.0.forward_graph(graph, f.1, gy)?;
    let reverse = reconstruction(graph, fgy, tgt)?;
    Ok((forward, reverse))
}

fn scalar_of(
    g: &mut Graph<f32>,
    build: impl FnOnce(&mut Graph<f32>) -> Result<Var>,
) -> Result<f32> {
    let v = build(g)?;
    Ok(g.value(v).data()[0])
}

pub fn loss_trans(pred: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    scalar_of(&mut g, |g| mse(g, p, t))
}

pub fn loss_contrast(pred: &Tensor, target: &Tensor, temperature: f64) -> Result<f32> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    scalar_of(&mut g, |g| info_nce(g, p, t, temperature))
}

pub fn loss_dist(pred: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    scalar_of(&mut g, |g| moment_match(g, p, t))
}

/// Cycle term of `f` and `g` on a batch of source and target vectors.
pub fn loss_cycle(
    f: &TranslatorParams,
    g: &TranslatorParams,
    batch_src: &Tensor,
    batch_tgt: &Tensor,
) -> Result<f32> {
    check_chain(f, g)?;
    let mut graph = Graph::new();
    let pf = f.params().attach(&mut graph, false);
    let pg = g.params().attach(&mut graph, false);
    let src = graph.constant(batch_src.clone());
    let tgt = graph.constant(batch_tgt.clone());
    let (a, b) = cycle_terms(&mut graph, (f, &pf), (g, &pg), src, tgt)?;
    scalar_of(&mut graph, |graph| graph.add(a, b))
}
