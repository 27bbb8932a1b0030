// SPDX-License-Identifier: MIT OR Apache-2.0

//! Conservative hidden-state injection.
//!
//! A translated vector `v` is mixed into the target model's residual stream as
//! `h' = (1 − α)·h + α·v`, but only
//!
//! - at the block outputs of the selected final layers,
//! - at the last few positions of the current sequence, and
//! - during the first few decoding steps.
//!
//! Everything outside that window passes through bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{BridgeError, Result};
use crate::tensor::{Element, Tensor};

/// Where, when and how strongly to inject. Layers are offsets from the end
/// (`-1` is the last block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionPolicy {
    pub alpha: f32,
    pub layers: Vec<i32>,
    pub positions: usize,
    pub steps: usize,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        InjectionPolicy {
            alpha: 0.3,
            layers: vec![-3, -2, -1],
            positions: 3,
            steps: 3,
        }
    }
}

impl InjectionPolicy {
    pub fn with_alpha(alpha: f32) -> Self {
        InjectionPolicy {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(BridgeError::Config(format!(
                "injection alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.layers.is_empty() {
            return Err(BridgeError::Config("injection targets no layers".into()));
        }
        if self.positions == 0 || self.steps == 0 {
            return Err(BridgeError::Config(
                "injection positions and steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Resolves layer offsets against a model of depth `n_layers`.
    pub fn bind(&self, n_layers: usize) -> Result<BoundPolicy> {
        self.validate()?;
        let mut layers = vec![false; n_layers];
        for &offset in &self.layers {
            let depth = n_layers as i64;
            if offset >= 0 || (offset as i64) < -depth {
                return Err(BridgeError::Config(format!(
                    "layer offset {offset} outside -{n_layers}..=-1"
                )));
            }
            layers[(depth + offset as i64) as usize] = true;
        }
        Ok(BoundPolicy {
            alpha: self.alpha,
            layers,
            positions: self.positions,
            steps: self.steps,
        })
    }
}

/// A policy resolved to concrete layer indices for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundPolicy {
    alpha: f32,
    layers: Vec<bool>,
    positions: usize,
    steps: usize,
}

impl BoundPolicy {
    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn targets_layer(&self, layer: usize) -> bool {
        self.layers.get(layer).copied().unwrap_or(false)
    }

    pub fn is_active(&self, step: usize) -> bool {
        step < self.steps
    }

    /// Rows of a `len`-row hidden state that are blended.
    pub fn target_rows(&self, len: usize) -> std::ops::Range<usize> {
        len.saturating_sub(self.positions)..len
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// `(1 − α)·h + α·v`, elementwise.
pub fn blend(h: &[f32], v: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if h.len() != v.len() {
        return Err(BridgeError::Dimension {
            context: "blend".into(),
            expected: h.len(),
            actual: v.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BridgeError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(h.iter()
        .zip(v)
        .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
        .collect())
}

fn blend_in_place<T: Element>(h: &mut [T], v: &[f32], alpha: f32) {
    let a = T::from_f32(alpha);
    let keep = T::from_f32(1.0 - alpha);
    for (x, &y) in h.iter_mut().zip(v) {
        *x = keep * *x + a * T::from_f32(y);
    }
}

/// Applies `policy` to the block output `hidden` (rows = positions) of
/// `layer` at decoding `step`. Returns whether anything was modified.
pub fn apply_policy<T: Element>(
    policy: &BoundPolicy,
    layer: usize,
    hidden: &mut Tensor<T>,
    v: &[f32],
    step: usize,
) -> Result<bool> {
    if v.len() != hidden.cols() {
        return Err(BridgeError::Dimension {
            context: "injected vector".into(),
            expected: hidden.cols(),
            actual: v.len(),
        });
    }
    if !policy.is_active(step) || !policy.targets_layer(layer) {
        return Ok(false);
    }
    for row in policy.target_rows(hidden.rows()) {
        blend_in_place(hidden.row_slice_mut(row), v, policy.alpha);
    }
    Ok(true)
}
