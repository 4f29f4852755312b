//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<F> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<F>>,
    pub second: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Drops moments of parameters whose names start with `prefix`.
    pub fn forget(&mut self, prefix: &str) {
        self.first.retain(|k, _| !k.starts_with(prefix));
        self.second.retain(|k, _| !k.starts_with(prefix));
    }
}

/// One AdamW update of every parameter that has a gradient.
///
/// Parameters absent from `grads` are left untouched (frozen or unused).
/// Any non-finite gradient aborts the step before anything is modified.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut OptimState<F>,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(NumError::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads.params() {
        if !g.all_finite() {
            return Err(NumError::NonFiniteGradient { name: name.clone() });
        }
        let p = params
            .get(name)
            .ok_or_else(|| NumError::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(NumError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for moments in [&state.first, &state.second] {
            if let Some(m) = moments.get(name) {
                if m.shape() != p.shape() {
                    return Err(NumError::MomentShape(name.clone()));
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = F::from_f64_lossy(cfg.beta1);
    let b2 = F::from_f64_lossy(cfg.beta2);
    let one = F::one();
    let decay = F::from_f64_lossy(1.0 - lr * weight_decay);
    let step = F::from_f64_lossy(lr / bc1);
    let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
    let eps = F::from_f64_lossy(cfg.eps);

    for (name, g) in grads.params() {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *pi = *pi * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_f64([v.len()], v).unwrap());
        s
    }

    fn quad_grads(p: &ParamStore<f64>, center: &[f64], weights: &[f64]) -> (f64, Gradients<f64>) {
        let mut tape = Tape::new();
        let x = tape.param("x", p.get("x").unwrap());
        let c = tape.constant(Tensor::from_f64([center.len()], center).unwrap());
        let w = tape.constant(Tensor::from_f64([weights.len()], weights).unwrap());
        let d = tape.sub(x, c).unwrap();
        let d2 = tape.mul(d, d).unwrap();
        let wd = tape.mul(d2, w).unwrap();
        let l = tape.sum(wd);
        (tape.value(l).item(), tape.backward(l).unwrap())
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut g = Gradients::default();
        g.insert("x", Tensor::zeros([2]));
        let mut st = OptimState::new();
        adamw_step(&mut p, &g, &mut st, 0.1, 0.0, &AdamWConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = store(&[1.0]);
        let (_, g) = quad_grads(&p, &[0.0], &[1.0]);
        let mut st = OptimState::new();
        adamw_step(&mut p, &g, &mut st, 0.1, 0.0, &AdamWConfig::default()).unwrap();
        assert!(p.get("x").unwrap().item() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = sum_i w_i (x_i - c_i)^2 has minimum 0 at x = c.
        let center = [0.5, -1.5, 2.0];
        let weights = [1.0, 3.0, 0.5];
        let mut p = store(&[3.0, 1.0, -1.0]);
        let mut st = OptimState::new();
        let cfg = AdamWConfig::default();
        let mut loss = f64::INFINITY;
        for i in 0..100 {
            let (l, g) = quad_grads(&p, &center, &weights);
            loss = l;
            // step size decays so the iterate settles instead of oscillating
            let lr = 0.2 * 0.97f64.powi(i);
            adamw_step(&mut p, &g, &mut st, lr, 0.0, &cfg).unwrap();
        }
        let (final_loss, _) = quad_grads(&p, &center, &weights);
        assert!(final_loss.min(loss) < 1e-3, "loss {final_loss}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = store(&[1.0, 2.0]);
        let before = p.clone();
        let mut g = Gradients::default();
        g.insert("x", Tensor::from_f64([2], &[0.1, f64::NAN]).unwrap());
        let mut st = OptimState::new();
        let err = adamw_step(&mut p, &g, &mut st, 0.1, 0.1, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, NumError::NonFiniteGradient { .. }));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut p = store(&[2.0]);
        let mut g = Gradients::default();
        g.insert("x", Tensor::zeros([1]));
        let mut st = OptimState::new();
        adamw_step(&mut p, &g, &mut st, 0.1, 0.5, &AdamWConfig::default()).unwrap();
        assert!((p.get("x").unwrap().item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
