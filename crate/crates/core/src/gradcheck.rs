// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from the production `f32` tape. The central
//! differences are evaluated on an `f64` tape so that the comparison measures
//! the backward rules rather than `f32` cancellation at small step sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BridgeError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

const PROJECTION_SEED: u64 = 0x9e37_79b9;

/// A computation to check: maps the perturbed tensor `x` to some output.
///
/// Non-scalar outputs are reduced to a scalar with a fixed random projection.
pub trait Probe {
    fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

fn projected<T: Element, P: Probe>(probe: &P, point: &Tensor<T>) -> Result<(Graph<T>, Var, Var)> {
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let out = probe.eval(&mut g, x)?;
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let weights: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
        .collect();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, x, loss))
}

/// Max over coordinates of `|analytic − fd| / max(1, |fd|)`.
pub fn grad_check<P: Probe>(probe: &P, point: &Tensor<f32>, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(BridgeError::Config(format!(
            "finite-difference step {eps} outside (0, 1e-2]"
        )));
    }
    let (g, x, loss) = projected(probe, point)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let base: Tensor<f64> = point.cast();
    let mut worst = 0.0f64;
    for j in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[j] += eps;
        let mut minus = base.clone();
        minus.data_mut()[j] -= eps;
        let (gp, _, lp) = projected(probe, &plus)?;
        let (gm, _, lm) = projected(probe, &minus)?;
        let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
        let err = (analytic.data()[j] as f64 - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Softmax;
    impl Probe for Softmax {
        fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            g.softmax(x)
        }
    }

    struct Constant;
    impl Probe for Constant {
        fn eval<T: Element>(&self, g: &mut Graph<T>, _x: Var) -> Result<Var> {
            Ok(g.constant(Tensor::full(&[2, 2], T::from_f64(3.0))))
        }
    }

    struct Argmax;
    impl Probe for Argmax {
        fn eval<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
            g.argmax(x)
        }
    }

    fn point() -> Tensor<f32> {
        Tensor::new(vec![1, 4], vec![0.3, -0.7, 1.1, 0.05]).unwrap()
    }

    #[test]
    fn softmax_passes() {
        assert!(grad_check(&Softmax, &point(), 1e-4).unwrap() < 1e-3);
    }

    #[test]
    fn constant_is_exact() {
        assert_eq!(grad_check(&Constant, &point(), 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn missing_gradient_reported() {
        assert!(matches!(
            grad_check(&Argmax, &point(), 1e-4),
            Err(BridgeError::NoGradient { .. })
        ));
    }

    #[test]
    fn step_size_validated() {
        assert!(grad_check(&Softmax, &point(), 0.0).is_err());
        assert!(grad_check(&Softmax, &point(), 0.1).is_err());
    }
}
