// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-encoder translator between two hidden-state spaces.
//!
//! One direction maps a `d_src` vector to a `d_tgt` vector in four stages:
//!
//! 1. extractor: linear `d_src → d_hidden` followed by GELU;
//! 2. slot expansion: linear `d_hidden → n_slots·d_hidden`, read as
//!    `n_slots` tokens of width `d_hidden`;
//! 3. alignment: multi-head self-attention over the slots of each sample,
//!    then residual and layer norm, then the mean over slots;
//! 4. generator: linear `d_hidden → d_tgt`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{BridgeError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{self, attention, block_mask, layer_norm, linear};
use crate::model::check_layout;
use crate::params::{Bound, Initializer, ParamSet};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"LBTR";
const VERSION: u32 = 1;
const KIND: &str = "translator checkpoint";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub d_src: usize,
    pub d_tgt: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_slots: usize,
    pub seed: u64,
}

/// Dimension-independent part of a [`TranslatorConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorShape {
    /// Hidden width; `None` means half the source width, rounded up to a
    /// multiple of `n_heads`.
    pub d_hidden: Option<usize>,
    pub n_heads: usize,
    pub n_slots: usize,
}

impl Default for TranslatorShape {
    fn default() -> Self {
        TranslatorShape {
            d_hidden: None,
            n_heads: 8,
            n_slots: 4,
        }
    }
}

impl TranslatorShape {
    pub fn config(&self, d_src: usize, d_tgt: usize, seed: u64) -> TranslatorConfig {
        let heads = self.n_heads.max(1);
        let d_hidden = self
            .d_hidden
            .unwrap_or_else(|| (d_src / 2).div_ceil(heads).max(1) * heads);
        TranslatorConfig {
            d_src,
            d_tgt,
            d_hidden,
            n_heads: self.n_heads,
            n_slots: self.n_slots,
            seed,
        }
    }
}

impl TranslatorConfig {
    /// The default [`TranslatorShape`] applied to a `d_src → d_tgt` map.
    pub fn for_dims(d_src: usize, d_tgt: usize, seed: u64) -> Self {
        TranslatorShape::default().config(d_src, d_tgt, seed)
    }

    /// The same shape pointed the other way, with its own seed.
    pub fn reversed(&self, seed: u64) -> Self {
        TranslatorConfig {
            d_src: self.d_tgt,
            d_tgt: self.d_src,
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_src == 0 || self.d_tgt == 0 || self.d_hidden == 0 {
            return Err(BridgeError::Config(
                "translator dimensions must be positive".into(),
            ));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(BridgeError::Config(format!(
                "d_hidden {} not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.n_slots == 0 {
            return Err(BridgeError::Config("n_slots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters of one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorParams {
    config: TranslatorConfig,
    params: ParamSet,
}

/// Seeded initialisation of one direction.
pub fn init_translator(config: &TranslatorConfig) -> Result<TranslatorParams> {
    config.validate()?;
    let h = config.d_hidden;
    let mut init = Initializer::new(config.seed);
    let mut params = ParamSet::new();
    layers::init_linear(&mut params, &mut init, "extractor", config.d_src, h);
    layers::init_linear(&mut params, &mut init, "slots", h, config.n_slots * h);
    layers::init_attention(&mut params, &mut init, "align", h);
    layers::init_norm(&mut params, &init, "align_norm", h);
    layers::init_linear(&mut params, &mut init, "generator", h, config.d_tgt);
    Ok(TranslatorParams {
        config: config.clone(),
        params,
    })
}

/// Maps one `d_src` vector to `d_tgt`.
pub fn translate(params: &TranslatorParams, v: &[f32]) -> Result<Vec<f32>> {
    params.translate(v)
}

/// `g(f(v))`.
pub fn cycle(f: &TranslatorParams, g: &TranslatorParams, v: &[f32]) -> Result<Vec<f32>> {
    check_chain(f, g)?;
    g.translate(&f.translate(v)?)
}

/// Checks that `g ∘ f` and `f ∘ g` are both well typed.
pub(crate) fn check_chain(f: &TranslatorParams, g: &TranslatorParams) -> Result<()> {
    if f.config.d_tgt != g.config.d_src {
        return Err(BridgeError::Dimension {
            context: "cycle: forward output vs reverse input".into(),
            expected: f.config.d_tgt,
            actual: g.config.d_src,
        });
    }
    if g.config.d_tgt != f.config.d_src {
        return Err(BridgeError::Dimension {
            context: "cycle: reverse output vs forward input".into(),
            expected: f.config.d_src,
            actual: g.config.d_tgt,
        });
    }
    Ok(())
}

impl TranslatorParams {
    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn translate(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.config.d_src {
            return Err(BridgeError::Dimension {
                context: "translator input".into(),
                expected: self.config.d_src,
                actual: v.len(),
            });
        }
        Ok(self.translate_batch(&Tensor::row(v.to_vec()))?.into_data())
    }

    /// Translates every row of an `n × d_src` batch.
    pub fn translate_batch(&self, rows: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.params.attach(&mut g, false);
        let x = g.constant(rows.clone());
        let y = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// Records the batched forward pass of `x` (`n × d_src`) on `g`.
    pub fn forward_graph<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = &self.config;
        let (n, width) = g
            .value(x)
            .dims2()
            .ok_or_else(|| BridgeError::shape("translate", "input must be a matrix"))?;
        if width != c.d_src {
            return Err(BridgeError::Dimension {
                context: "translator input".into(),
                expected: c.d_src,
                actual: width,
            });
        }
        if n == 0 {
            return Err(BridgeError::shape("translate", "empty batch"));
        }
        let h = c.d_hidden;
        let k = c.n_slots;
        let e = linear(g, p, "extractor", x)?;
        let e = g.gelu(e)?;
        let s = linear(g, p, "slots", e)?;
        let s = g.reshape(s, &[n * k, h])?;
        let a = attention(g, p, "align", s, c.n_heads, &block_mask(n, k))?;
        let r = g.add(s, a)?;
        let r = layer_norm(g, p, "align_norm", r)?;
        let pool = g.constant(pool_matrix(n, k));
        let pooled = g.matmul(pool, r)?;
        linear(g, p, "generator", pooled)
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
        for x in [c.d_src, c.d_tgt, c.d_hidden, c.n_heads, c.n_slots] {
            w.u32(x as u32);
        }
        w.u64(c.seed);
        w.u32(self.params.len() as u32);
        w.records(&self.params);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(KIND, bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let config_at = r.offset();
        let config = TranslatorConfig {
            d_src: r.u32()? as usize,
            d_tgt: r.u32()? as usize,
            d_hidden: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            n_slots: r.u32()? as usize,
            seed: r.u64()?,
        };
        let template = init_translator(&config).map_err(|e| BridgeError::Format {
            kind: KIND,
            offset: config_at,
            detail: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let params = r.records(count)?;
        r.finish()?;
        check_layout(&template.params, &params, KIND)?;
        Ok(TranslatorParams { config, params })
    }
}

/// `n × n·k` matrix averaging each consecutive group of `k` rows.
fn pool_matrix<T: Element>(n: usize, k: usize) -> Tensor<T> {
    let w = T::from_f64(1.0 / k as f64);
    let mut data = vec![T::zero(); n * n * k];
    for i in 0..n {
        data[i * n * k + i * k..i * n * k + (i + 1) * k].fill(w);
    }
    Tensor::new(vec![n, n * k], data).expect("sized")
}
