//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first_moment.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second_moment.get(name)
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
///
/// Parameters absent from `grads` are left alone; a gradient without a
/// matching parameter, or with a different shape, is an error and nothing
/// is modified.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        for moments in [&state.first_moment, &state.second_moment] {
            if let Some(m) = moments.get(name) {
                if m.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), m.shape()));
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *pi -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: &[f64]) -> Params {
        Params::from([(name.to_string(), Tensor::vector(v.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_fixed_point() {
        let mut p = single("w", &[0.5, -2.0, 3.0]);
        let before = p.clone();
        let g = single("w", &[0.0, 0.0, 0.0]);
        let mut s = AdamState::new(0.1);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = single("w", &[0.0]);
        let g = single("w", &[1.0]);
        let mut s = AdamState::new(0.1);
        adam_step(&mut p, &g, &mut s).unwrap();
        let w = p["w"].data()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
        assert_eq!(w, -0.1 / (1.0 + 1e-8));
    }

    #[test]
    fn step_counter_advances() {
        let mut p = single("w", &[1.0]);
        let g = single("w", &[0.3]);
        let mut s = AdamState::new(0.01);
        assert_eq!(s.step(), 0);
        adam_step(&mut p, &g, &mut s).unwrap();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(s.step(), 2);
        assert_eq!(s.first_moment("w").unwrap().shape(), &[1]);
    }

    #[test]
    fn shape_mismatch_rejected_without_side_effects() {
        let mut p = single("w", &[1.0, 2.0]);
        let g = single("w", &[1.0]);
        let mut s = AdamState::new(0.01);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.step(), 0);
        assert!(adam_step(&mut p, &single("other", &[1.0]), &mut s).is_err());
    }

    #[test]
    fn deterministic() {
        let p0 = single("w", &[0.25, -0.75]);
        let g = single("w", &[0.1, 0.9]);
        let run = || {
            let mut p = p0.clone();
            let mut s = AdamState::new(0.05);
            for _ in 0..3 {
                adam_step(&mut p, &g, &mut s).unwrap();
            }
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        let bits = |p: &Params| p["w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(sa, sb);
    }
}
