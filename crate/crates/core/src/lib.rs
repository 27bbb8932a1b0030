// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent bridge between two toy language models.
//!
//! A dual-encoder translator maps one model's hidden-state vectors into the
//! other's space, and an injection policy blends translated vectors into the
//! target model's residual stream during generation.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod injection;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod store;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod translator;

mod binio;
mod layers;

pub use error::{BridgeError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Element, Tensor};
