// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer language models.
//!
//! Blocks are post-norm: `x = LN(x + attn(x))`, `x = LN(x + mlp(x))`. The
//! output of each block is the residual stream recorded in [`HiddenTrace`]
//! and the site where injection hooks run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{BridgeError, Result};
use crate::graph::{argmax, Graph, Var};
use crate::injection::{apply_policy, InjectionPolicy};
use crate::layers::{self, attention, causal_mask, layer_norm, linear};
use crate::optim::{adamw_step, AdamWState};
use crate::params::{Bound, Initializer, ParamSet};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"TOYM";
const VERSION: u32 = 1;

/// Shape and seed of a toy model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    /// The 64-wide, 4-layer, 4-head shape shared by both stock models.
    pub fn stock(seed: u64) -> Self {
        ToyModelConfig {
            vocab_size: crate::text::VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            context_len: 64,
            seed,
        }
    }

    /// Same as [`ToyModelConfig::stock`] but 96 wide.
    pub fn wide(seed: u64) -> Self {
        ToyModelConfig {
            d_model: 96,
            ..Self::stock(seed)
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(BridgeError::Config(format!(
                "n_layers must be at least 3, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(BridgeError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return Err(BridgeError::Config(
                "vocab_size and context_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Block outputs of one forward pass: `layers[l]` is `seq_len × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<Tensor>,
}

impl HiddenTrace {
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `seq_len × vocab_size`
    pub logits: Tensor,
    pub trace: HiddenTrace,
}

/// Decoding settings. Temperature 0 means greedy.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub temperature: f32,
    pub seed: u64,
    pub record_traces: bool,
}

impl GenerateOptions {
    pub fn greedy(steps: usize) -> Self {
        GenerateOptions {
            steps,
            temperature: 0.0,
            seed: 0,
            record_traces: false,
        }
    }
}

/// A translated vector and the policy used to inject it.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    pub policy: &'a InjectionPolicy,
    pub vector: &'a [f32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens only (the prompt is not repeated).
    pub tokens: Vec<usize>,
    /// Pre-sampling next-token logits, one row per step.
    pub logits: Vec<Vec<f32>>,
    /// Full hidden traces per step, when requested.
    pub traces: Vec<HiddenTrace>,
}

/// A decoder-only transformer language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    params: ParamSet,
}

type Hook<'h, T> = &'h mut dyn FnMut(usize, &mut Tensor<T>) -> Result<bool>;

impl ToyModel {
    /// Seeded random initialisation.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Initializer::new(config.seed);
        let mut params = ParamSet::new();
        params.insert("embed.tokens", init.xavier(config.vocab_size, d));
        params.insert("embed.positions", init.xavier(config.context_len, d));
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            layers::init_attention(&mut params, &mut init, &format!("{p}.attn"), d);
            layers::init_norm(&mut params, &init, &format!("{p}.norm1"), d);
            layers::init_linear(
                &mut params,
                &mut init,
                &format!("{p}.mlp.up"),
                d,
                config.d_ff(),
            );
            layers::init_linear(
                &mut params,
                &mut init,
                &format!("{p}.mlp.down"),
                config.d_ff(),
                d,
            );
            layers::init_norm(&mut params, &init, &format!("{p}.norm2"), d);
        }
        layers::init_linear(&mut params, &mut init, "head", d, config.vocab_size);
        Ok(ToyModel { config, params })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(BridgeError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(BridgeError::Input(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(BridgeError::Input(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Returns the logits node and the
    /// block-output node of each layer.
    fn forward_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &[usize],
        hook: Hook<'_, T>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_tokens(tokens)?;
        let len = tokens.len();
        let positions: Vec<usize> = (0..len).collect();
        let tok = g.gather(p.var("embed.tokens")?, tokens)?;
        let pos = g.gather(p.var("embed.positions")?, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = causal_mask(len);
        let mut outputs = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let pre = format!("layers.{l}");
            let a = attention(g, p, &format!("{pre}.attn"), x, self.config.n_heads, &mask)?;
            let r = g.add(x, a)?;
            x = layer_norm(g, p, &format!("{pre}.norm1"), r)?;
            let up = linear(g, p, &format!("{pre}.mlp.up"), x)?;
            let act = g.gelu(up)?;
            let down = linear(g, p, &format!("{pre}.mlp.down"), act)?;
            let r = g.add(x, down)?;
            x = layer_norm(g, p, &format!("{pre}.norm2"), r)?;
            let mut h = g.value(x).clone();
            if hook(l, &mut h)? {
                // Injected states are treated as constants.
                x = g.constant(h);
            }
            outputs.push(x);
        }
        let logits = linear(g, p, "head", x)?;
        Ok((logits, outputs))
    }

    fn run(&self, tokens: &[usize], hook: Hook<'_, f32>) -> Result<ForwardOutput> {
        let mut g = Graph::<f32>::new();
        let p = self.params.attach(&mut g, false);
        let (logits, outputs) = self.forward_graph(&mut g, &p, tokens, hook)?;
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            trace: HiddenTrace {
                layers: outputs.iter().map(|&v| g.value(v).clone()).collect(),
            },
        })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        self.run(tokens, &mut |_, _| Ok(false))
    }

    /// Forward pass with `hook(layer, block_output)` able to rewrite each block output.
    pub fn forward_with_hook(
        &self,
        tokens: &[usize],
        hook: &mut dyn FnMut(usize, &mut Tensor) -> Result<bool>,
    ) -> Result<ForwardOutput> {
        self.run(tokens, hook)
    }

    /// Final block output at the last prompt position.
    pub fn extract_vector(&self, prompt: &[usize]) -> Result<Vec<f32>> {
        let out = self.forward(prompt)?;
        let last = out.trace.last();
        Ok(last.row_slice(last.rows() - 1).to_vec())
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`, with gradients.
    fn loss_and_grads(&self, inputs: &[usize], targets: &[usize]) -> Result<(f32, Vec<Tensor>)> {
        let mut g = Graph::<f32>::new();
        let p = self.params.attach(&mut g, true);
        let (logits, _) = self.forward_graph(&mut g, &p, inputs, &mut |_, _| Ok(false))?;
        let loss = g.cross_entropy(logits, targets)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], p.collect(&grads)))
    }

    /// Mean cross-entropy (nats) over the same windows training uses.
    pub fn corpus_loss(&self, corpus: &[usize], stride: usize) -> Result<f32> {
        let starts = windows(corpus.len(), self.config.context_len, stride);
        let mut total = 0.0f64;
        for &s in &starts {
            let l = self.config.context_len;
            let out = self.forward(&corpus[s..s + l])?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(out.logits);
            let ce = g.cross_entropy(x, &corpus[s + 1..s + l + 1])?;
            total += g.value(ce).data()[0] as f64;
        }
        Ok((total / starts.len() as f64) as f32)
    }

    /// Autoregressive decoding, optionally with hidden-state injection.
    pub fn generate(
        &self,
        prompt: &[usize],
        opts: &GenerateOptions,
        injection: Option<Injection<'_>>,
    ) -> Result<Generation> {
        self.check_tokens(prompt)?;
        if !(opts.temperature >= 0.0 && opts.temperature.is_finite()) {
            return Err(BridgeError::Config(format!(
                "temperature {} must be finite and non-negative",
                opts.temperature
            )));
        }
        let bound = match injection {
            Some(inj) => {
                if inj.vector.len() != self.config.d_model {
                    return Err(BridgeError::Dimension {
                        context: "injected vector".into(),
                        expected: self.config.d_model,
                        actual: inj.vector.len(),
                    });
                }
                Some((inj.policy.bind(self.config.n_layers)?, inj.vector))
            }
            None => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut seq = prompt.to_vec();
        let mut out = Generation {
            tokens: Vec::with_capacity(opts.steps),
            logits: Vec::with_capacity(opts.steps),
            traces: Vec::new(),
        };
        for step in 0..opts.steps {
            let start = seq.len().saturating_sub(self.config.context_len);
            let window = &seq[start..];
            let fwd = match &bound {
                Some((policy, v)) => self.run(window, &mut |layer, h| {
                    apply_policy(policy, layer, h, v, step)
                })?,
                None => self.forward(window)?,
            };
            let last = fwd.logits.row_slice(fwd.logits.rows() - 1).to_vec();
            let next = if opts.temperature == 0.0 {
                argmax(&last)
            } else {
                sample(&last, opts.temperature, &mut rng)
            };
            if opts.record_traces {
                out.traces.push(fwd.trace);
            }
            out.logits.push(last);
            out.tokens.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for x in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.context_len,
        ] {
            w.u32(x as u32);
        }
        w.u64(c.seed);
        w.u32(self.params.len() as u32);
        w.records(&self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("toy model checkpoint", bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let config_at = r.offset();
        let config = ToyModelConfig {
            vocab_size: r.u32()? as usize,
            d_model: r.u32()? as usize,
            n_layers: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            context_len: r.u32()? as usize,
            seed: r.u64()?,
        };
        let template = ToyModel::init(config.clone()).map_err(|e| BridgeError::Format {
            kind: "toy model checkpoint",
            offset: config_at,
            detail: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let params = r.records(count)?;
        r.finish()?;
        check_layout(&template.params, &params, "toy model checkpoint")?;
        Ok(ToyModel { config, params })
    }
}

/// Checks that a loaded parameter set has exactly the template's names and shapes.
pub(crate) fn check_layout(
    template: &ParamSet,
    loaded: &ParamSet,
    kind: &'static str,
) -> Result<()> {
    let mismatch = template.len() != loaded.len()
        || template
            .iter()
            .zip(loaded.iter())
            .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape());
    if mismatch {
        return Err(BridgeError::Format {
            kind,
            offset: 0,
            detail: "parameter names or shapes do not match the configured architecture".into(),
        });
    }
    Ok(())
}

fn sample(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| (((x - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn windows(corpus_len: usize, context_len: usize, stride: usize) -> Vec<usize> {
    if corpus_len <= context_len {
        return Vec::new();
    }
    (0..corpus_len - context_len)
        .step_by(stride.max(1))
        .collect()
}

/// Settings for [`train_lm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainOptions {
    pub epochs: usize,
    pub lr: f32,
    /// Windows averaged per optimiser step.
    pub batch_windows: usize,
    /// Offset between consecutive training windows.
    pub stride: usize,
}

impl LmTrainOptions {
    pub fn with_epochs(epochs: usize) -> Self {
        LmTrainOptions {
            epochs,
            ..Self::default()
        }
    }
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        LmTrainOptions {
            epochs: 12,
            lr: 3e-3,
            batch_windows: 4,
            stride: 48,
        }
    }
}

/// Trains a fresh model on a token corpus. Returns the model and the mean
/// training cross-entropy of each epoch.
pub fn train_lm(
    corpus: &[usize],
    config: &ToyModelConfig,
    opts: &LmTrainOptions,
) -> Result<(ToyModel, Vec<f32>)> {
    config.validate()?;
    if opts.epochs == 0 {
        return Err(BridgeError::Config("epochs must be at least 1".into()));
    }
    if corpus.len() <= config.context_len {
        return Err(BridgeError::Input(format!(
            "corpus of {} tokens must be longer than the context length {}",
            corpus.len(),
            config.context_len
        )));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t >= config.vocab_size) {
        return Err(BridgeError::Input(format!(
            "vocabulary overflow: token id {t} >= vocab_size {}",
            config.vocab_size
        )));
    }

    let mut model = ToyModel::init(config.clone())?;
    let mut state = AdamWState::new(&model.params, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1a2b);
    let mut starts = windows(corpus.len(), config.context_len, opts.stride);
    let l = config.context_len;
    let batch = opts.batch_windows.max(1);
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        starts.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (b, chunk) in starts.chunks(batch).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for &s in chunk {
                let (loss, grads) =
                    model.loss_and_grads(&corpus[s..s + l], &corpus[s + 1..s + l + 1])?;
                if !loss.is_finite() {
                    return Err(BridgeError::NonFiniteLoss { epoch, batch: b });
                }
                epoch_loss += loss as f64;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += q;
                            }
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f32;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adamw_step(&mut model.params, &grads, &mut state)?;
        }
        history.push((epoch_loss / starts.len() as f64) as f32);
    }
    Ok((model, history))
}

/// Entropy (nats) of the corpus's unigram distribution.
pub fn unigram_entropy(corpus: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &t in corpus {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = corpus.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
