// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired-vector datasets and translator training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, Result};
use crate::eval::mean_cosine;
use crate::graph::{Graph, Var};
use crate::losses::{info_nce, moment_match, mse, reconstruction, LossWeights};
use crate::model::ToyModel;
use crate::optim::{adamw_step, AdamWState};
use crate::params::{derive_seed, Bound};
use crate::tensor::Tensor;
use crate::text::encode;
use crate::translator::{init_translator, TranslatorParams, TranslatorShape};

/// Minimum number of prompts [`build_pair_dataset`] accepts.
pub const MIN_PROMPTS: usize = 20;

const STREAM_FORWARD_INIT: u64 = 1;
const STREAM_REVERSE_INIT: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_SPLIT: u64 = 4;

/// Row-aligned source and target vectors with a train / held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub prompts: Vec<String>,
    /// `N × d_src`
    pub src: Tensor,
    /// `N × d_tgt`
    pub tgt: Tensor,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(vec![idx.len(), cols], data).expect("sized")
}

impl PairDataset {
    /// Splits already-extracted vectors. `split_fraction` is the training share;
    /// the held-out set has `round(N·(1 − split_fraction))` rows.
    pub fn from_vectors(
        prompts: Vec<String>,
        src: Tensor,
        tgt: Tensor,
        split_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(BridgeError::Config(format!(
                "split fraction {split_fraction} outside (0, 1)"
            )));
        }
        let n = src.rows();
        if src.dims2().is_none() || tgt.dims2().is_none() || tgt.rows() != n || prompts.len() != n {
            return Err(BridgeError::Input(format!(
                "{} prompts, {} source rows and {} target rows must agree",
                prompts.len(),
                n,
                tgt.rows()
            )));
        }
        let held = (n as f64 * (1.0 - split_fraction)).round() as usize;
        if held == 0 || n - held < 2 {
            return Err(BridgeError::Input(format!(
                "split of {n} pairs at {split_fraction} leaves {held} held-out and {} training rows",
                n - held
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            STREAM_SPLIT,
        )));
        let mut heldout = order[..held].to_vec();
        let mut train = order[held..].to_vec();
        heldout.sort_unstable();
        train.sort_unstable();
        Ok(PairDataset {
            prompts,
            src,
            tgt,
            train,
            heldout,
        })
    }

    pub fn len(&self) -> usize {
        self.src.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_src(&self) -> usize {
        self.src.cols()
    }

    pub fn d_tgt(&self) -> usize {
        self.tgt.cols()
    }

    pub fn src_rows(&self, idx: &[usize]) -> Tensor {
        gather(&self.src, idx)
    }

    pub fn tgt_rows(&self, idx: &[usize]) -> Tensor {
        gather(&self.tgt, idx)
    }

    /// Inputs and targets of one direction for the given rows.
    pub fn oriented(&self, direction: Direction, idx: &[usize]) -> (Tensor, Tensor) {
        match direction {
            Direction::Forward => (self.src_rows(idx), self.tgt_rows(idx)),
            Direction::Reverse => (self.tgt_rows(idx), self.src_rows(idx)),
        }
    }
}

/// Extracts one vector per prompt from each model and splits the pairs.
pub fn build_pair_dataset(
    model_src: &ToyModel,
    model_tgt: &ToyModel,
    prompts: &[String],
    split_fraction: f64,
    seed: u64,
) -> Result<PairDataset> {
    if prompts.len() < MIN_PROMPTS {
        return Err(BridgeError::Input(format!(
            "need at least {MIN_PROMPTS} prompts, got {}",
            prompts.len()
        )));
    }
    let limit = model_src
        .config()
        .context_len
        .min(model_tgt.config().context_len);
    let mut src = Vec::with_capacity(prompts.len());
    let mut tgt = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let tokens = encode(p).map_err(|e| BridgeError::Input(format!("prompt {i}: {e}")))?;
        if tokens.is_empty() || tokens.len() > limit {
            return Err(BridgeError::Input(format!(
                "prompt {i} has {} tokens, expected 1..={limit}",
                tokens.len()
            )));
        }
        src.push(model_src.extract_vector(&tokens)?);
        tgt.push(model_tgt.extract_vector(&tokens)?);
    }
    PairDataset::from_vectors(
        prompts.to_vec(),
        Tensor::from_rows(&src)?,
        Tensor::from_rows(&tgt)?,
        split_fraction,
        seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Source space to target space (`f`).
    Forward,
    /// Target space to source space (`g`).
    Reverse,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(BridgeError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(BridgeError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(BridgeError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        self.weights.validate()
    }
}

/// Per-epoch training dynamics of one direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub direction: Direction,
    pub epochs: usize,
    /// Mean composite loss over the epoch's batches.
    pub loss: Vec<f64>,
    /// Mean held-out cosine after each epoch.
    pub heldout_cosine: Vec<f64>,
    /// Mean held-out cosine of the freshly initialised translator.
    pub initial_heldout_cosine: f64,
}

impl TrainHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_heldout_cosine(&self) -> f64 {
        self.heldout_cosine
            .last()
            .copied()
            .unwrap_or(self.initial_heldout_cosine)
    }
}

/// Output of [`train_bidirectional`].
#[derive(Clone, Debug, PartialEq)]
pub struct Bidirectional {
    pub forward: TranslatorParams,
    pub reverse: TranslatorParams,
    pub forward_history: TrainHistory,
    pub reverse_history: TrainHistory,
}

struct Side {
    direction: Direction,
    params: TranslatorParams,
    state: AdamWState,
    history: TrainHistory,
    heldout_input: Tensor,
    heldout_target: Tensor,
    epoch_loss: f64,
}

impl Side {
    fn new(
        dataset: &PairDataset,
        direction: Direction,
        config: &TrainConfig,
        shape: &TranslatorShape,
    ) -> Result<Self> {
        let (d_in, d_out, stream) = match direction {
            Direction::Forward => (dataset.d_src(), dataset.d_tgt(), STREAM_FORWARD_INIT),
            Direction::Reverse => (dataset.d_tgt(), dataset.d_src(), STREAM_REVERSE_INIT),
        };
        let params = init_translator(&shape.config(d_in, d_out, derive_seed(config.seed, stream)))?;
        let state = AdamWState::new(params.params(), config.lr);
        let (heldout_input, heldout_target) = dataset.oriented(direction, &dataset.heldout);
        let initial = mean_cosine(&params.translate_batch(&heldout_input)?, &heldout_target)?;
        Ok(Side {
            direction,
            params,
            state,
            history: TrainHistory {
                direction,
                epochs: config.epochs,
                loss: Vec::with_capacity(config.epochs),
                heldout_cosine: Vec::with_capacity(config.epochs),
                initial_heldout_cosine: initial,
            },
            heldout_input,
            heldout_target,
            epoch_loss: 0.0,
        })
    }

    fn end_epoch(&mut self, batches: usize) -> Result<()> {
        self.history.loss.push(self.epoch_loss / batches as f64);
        self.epoch_loss = 0.0;
        let pred = self.params.translate_batch(&self.heldout_input)?;
        self.history
            .heldout_cosine
            .push(mean_cosine(&pred, &self.heldout_target)?);
        Ok(())
    }
}

/// Shuffled training batches; a trailing single row joins the previous batch
/// so every batch supports the moment-matching term.
fn epoch_batches(train: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Weighted sum of the direct-translation terms of one direction, plus the
/// cycle half through `partner` when given.
fn direction_loss(
    g: &mut Graph<f32>,
    me: (&TranslatorParams, &Bound),
    partner: Option<(&TranslatorParams, &Bound)>,
    input: Var,
    target: Var,
    w: &LossWeights,
) -> Result<Var> {
    let pred = me.0.forward_graph(g, me.1, input)?;
    let trans = mse(g, pred, target)?;
    let mut total = g.scale(trans, w.w_trans)?;
    let contrast = info_nce(g, pred, target, w.temperature)?;
    let contrast = g.scale(contrast, w.w_contrast)?;
    total = g.add(total, contrast)?;
    let dist = moment_match(g, pred, target)?;
    let dist = g.scale(dist, w.w_dist)?;
    total = g.add(total, dist)?;
    if let Some((p, bound)) = partner {
        let back = p.forward_graph(g, bound, pred)?;
        let cyc = reconstruction(g, back, input)?;
        let cyc = g.scale(cyc, w.w_cycle)?;
        total = g.add(total, cyc)?;
    }
    Ok(total)
}

fn numeric_at(epoch: usize, batch: usize) -> impl Fn(BridgeError) -> BridgeError {
    move |e| {
        if e.is_numeric() {
            BridgeError::NonFiniteLoss { epoch, batch }
        } else {
            e
        }
    }
}

/// One optimisation step over a batch for every active side. With a positive
/// cycle weight the two sides are coupled through the cycle terms.
fn step(
    sides: &mut [Side],
    batch: &[usize],
    dataset: &PairDataset,
    w: &LossWeights,
    at: (usize, usize),
) -> Result<()> {
    let numeric = numeric_at(at.0, at.1);
    let coupled = sides.len() == 2 && w.w_cycle > 0.0;
    let updates = {
        let mut g = Graph::<f32>::new();
        let bounds: Vec<Bound> = sides
            .iter()
            .map(|s| s.params.params().attach(&mut g, true))
            .collect();
        let mut totals = Vec::with_capacity(sides.len());
        for (i, side) in sides.iter().enumerate() {
            let (x, y) = dataset.oriented(side.direction, batch);
            let x = g.constant(x);
            let y = g.constant(y);
            let partner = coupled.then(|| (&sides[1 - i].params, &bounds[1 - i]));
            let loss = direction_loss(&mut g, (&side.params, &bounds[i]), partner, x, y, w)
                .map_err(&numeric)?;
            totals.push(loss);
        }
        let mut root = totals[0];
        for &t in &totals[1..] {
            root = g.add(root, t).map_err(&numeric)?;
        }
        let grads = g.backward(root).map_err(&numeric)?;
        bounds
            .iter()
            .zip(&totals)
            .map(|(bound, &loss)| (g.value(loss).data()[0] as f64, bound.collect(&grads)))
            .collect::<Vec<_>>()
    };
    if updates.iter().any(|(loss, _)| !loss.is_finite()) {
        return Err(BridgeError::NonFiniteLoss {
            epoch: at.0,
            batch: at.1,
        });
    }
    for (side, (loss, grads)) in sides.iter_mut().zip(updates) {
        side.epoch_loss += loss;
        adamw_step(side.params.params_mut(), &grads, &mut side.state)?;
    }
    Ok(())
}

fn train(
    dataset: &PairDataset,
    config: &TrainConfig,
    shape: &TranslatorShape,
    directions: &[Direction],
) -> Result<Vec<(TranslatorParams, TrainHistory)>> {
    config.validate()?;
    if dataset.train.len() < 2 || dataset.heldout.is_empty() {
        return Err(BridgeError::Input(
            "dataset needs at least 2 training rows and 1 held-out row".into(),
        ));
    }
    let mut sides = directions
        .iter()
        .map(|&d| Side::new(dataset, d, config, shape))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_BATCHES));
    for epoch in 0..config.epochs {
        let batches = epoch_batches(&dataset.train, config.batch_size, &mut rng);
        for (b, batch) in batches.iter().enumerate() {
            step(&mut sides, batch, dataset, &config.weights, (epoch, b))?;
        }
        for side in &mut sides {
            side.end_epoch(batches.len())?;
        }
    }
    Ok(sides.into_iter().map(|s| (s.params, s.history)).collect())
}

/// Trains one direction. A positive cycle weight needs the opposite
/// direction, so both are trained jointly and only `direction` is returned;
/// with `w_cycle = 0` the requested direction is trained alone.
pub fn train_translator(
    dataset: &PairDataset,
    direction: Direction,
    config: &TrainConfig,
    shape: &TranslatorShape,
) -> Result<(TranslatorParams, TrainHistory)> {
    if config.weights.w_cycle > 0.0 {
        let both = train_bidirectional(dataset, config, shape)?;
        return Ok(match direction {
            Direction::Forward => (both.forward, both.forward_history),
            Direction::Reverse => (both.reverse, both.reverse_history),
        });
    }
    let mut out = train(dataset, config, shape, &[direction])?;
    Ok(out.pop().expect("one side"))
}

/// Trains `f` and `g` together; they share the cycle term when `w_cycle > 0`.
pub fn train_bidirectional(
    dataset: &PairDataset,
    config: &TrainConfig,
    shape: &TranslatorShape,
) -> Result<Bidirectional> {
    let mut out = train(
        dataset,
        config,
        shape,
        &[Direction::Forward, Direction::Reverse],
    )?;
    let (reverse, reverse_history) = out.pop().expect("two sides");
    let (forward, forward_history) = out.pop().expect("two sides");
    Ok(Bidirectional {
        forward,
        reverse,
        forward_history,
        reverse_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> PairDataset {
        let src: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                (0..6)
                    .map(|j| ((i * 7 + j * 3) as f32 * 0.41).sin())
                    .collect()
            })
            .collect();
        let tgt: Vec<Vec<f32>> = src
            .iter()
            .map(|r| vec![r[0] + r[1], r[2] - r[3], r[4] * 2.0, r[5] - r[0]])
            .collect();
        PairDataset::from_vectors(
            (0..n).map(|i| format!("p{i}")).collect(),
            Tensor::from_rows(&src).unwrap(),
            Tensor::from_rows(&tgt).unwrap(),
            0.75,
            3,
        )
        .unwrap()
    }

    fn small_shape() -> TranslatorShape {
        TranslatorShape {
            d_hidden: Some(8),
            n_heads: 2,
            n_slots: 2,
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = toy_dataset(20);
        assert_eq!(d.heldout.len(), 5);
        assert_eq!(d.train.len(), 15);
        assert!(d.heldout.iter().all(|i| !d.train.contains(i)));
        assert_eq!(toy_dataset(20), d);
    }

    #[test]
    fn batches_never_leave_a_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(&(0..17).collect::<Vec<_>>(), 8, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            train_bidirectional(&toy_dataset(20), &cfg, &small_shape()),
            Err(BridgeError::Config(_))
        ));
    }

    #[test]
    fn history_lengths_and_determinism() {
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let d = toy_dataset(20);
        let a = train_bidirectional(&d, &cfg, &small_shape()).unwrap();
        let b = train_bidirectional(&d, &cfg, &small_shape()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.forward_history.loss.len(), 3);
        assert_eq!(a.reverse_history.heldout_cosine.len(), 3);
        let json: serde_json::Value =
            serde_json::from_str(&a.forward_history.to_json().unwrap()).unwrap();
        assert_eq!(json["direction"], "forward");
        assert_eq!(json["epochs"], 3);
    }
}
