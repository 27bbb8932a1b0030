// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay.

use crate::error::{BridgeError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Optimiser hyper-parameters and moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    /// Fresh state with β = (0.9, 0.999), ε = 1e-8 and weight decay 0.01.
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        Self::with_hyper(params, lr, (0.9, 0.999), 1e-8, 0.01)
    }

    pub fn with_hyper(
        params: &ParamSet,
        lr: f32,
        betas: (f32, f32),
        eps: f32,
        weight_decay: f32,
    ) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect()
        };
        AdamWState {
            step: 0,
            lr,
            betas,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Applies one AdamW update in place.
///
/// Every gradient is validated before any parameter is touched, so a rejected
/// step leaves both `params` and `state` unchanged.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamWState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(BridgeError::shape(
            "adamw_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (((name, p), g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(BridgeError::shape(
                "adamw_step",
                format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(BridgeError::NonFiniteGradient {
                name: name.to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = state.betas;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;

    for (((_, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = ParamSet::new();
        p.insert(
            "a",
            Tensor::new(vec![2, 2], vec![1., -2., 3., 0.25]).unwrap(),
        );
        let before = p.clone();
        let mut s = AdamWState::with_hyper(&p, 1e-3, (0.9, 0.999), 1e-8, 0.0);
        adamw_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = single(1.0);
        let mut s = AdamWState::with_hyper(&p, 1e-3, (0.9, 0.999), 1e-8, 0.0);
        adamw_step(&mut p, &[Tensor::new(vec![1], vec![0.5]).unwrap()], &mut s).unwrap();
        // t = 1: m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        let got = p.get("w").unwrap().data()[0] as f64;
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = single(2.0);
        let mut s = AdamWState::with_hyper(&p, 1e-3, (0.9, 0.999), 1e-8, 0.1);
        adamw_step(&mut p, &[Tensor::zeros(&[1])], &mut s).unwrap();
        let got = p.get("w").unwrap().data()[0];
        assert_eq!(got, 2.0 * (1.0 - 1e-3 * 0.1));
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = single(1.0);
        let before = p.clone();
        let mut s = AdamWState::new(&p, 1e-3);
        let err = adamw_step(
            &mut p,
            &[Tensor::new(vec![1], vec![f32::NAN]).unwrap()],
            &mut s,
        )
        .unwrap_err();
        assert!(matches!(err, BridgeError::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut p = single(0.37);
            let mut s = AdamWState::new(&p, 1e-3);
            for k in 0..5 {
                let g = Tensor::new(vec![1], vec![0.1 * k as f32 - 0.2]).unwrap();
                adamw_step(&mut p, &[g], &mut s).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
