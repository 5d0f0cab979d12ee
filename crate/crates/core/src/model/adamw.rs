use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    /// Learning rate α.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay λ.
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }

    /// `√(1−β₂ᵗ) / (1−β₁ᵗ)`, the bias-correction factor of step `t`.
    pub fn bias_factor(&self, t: u64) -> f64 {
        let t = t as i32;
        (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))
    }
}

/// AdamW optimizer state: first/second moments per parameter and the step
/// counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    decay: Vec<bool>,
}

impl AdamW {
    /// Fresh state for parameters shaped like `params`; weight decay applies
    /// to every parameter.
    pub fn new(hyper: AdamWHyper, params: &[Tensor]) -> Result<Self> {
        Self::with_decay_mask(hyper, params, vec![true; params.len()])
    }

    /// Fresh state where only parameters with `decay[i]` are decayed.
    pub fn with_decay_mask(hyper: AdamWHyper, params: &[Tensor], decay: Vec<bool>) -> Result<Self> {
        hyper.validate()?;
        if decay.len() != params.len() {
            return Err(shape_err("decay mask length differs from parameter count"));
        }
        Ok(Self {
            hyper,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            decay,
        })
    }

    /// Standard mask for a model: decay matrices, not norm gains.
    pub fn for_params(hyper: AdamWHyper, params: &[Tensor]) -> Result<Self> {
        let mask = params.iter().map(|p| p.shape().len() == 2).collect();
        Self::with_decay_mask(hyper, params, mask)
    }

    /// Restores a saved state.
    pub fn from_state(hyper: AdamWHyper, params: &[Tensor], m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Result<Self> {
        let mut s = Self::for_params(hyper, params)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(shape_err("moment count differs from parameter count"));
        }
        for ((p, a), b) in params.iter().zip(&m).zip(&v) {
            if p.shape() != a.shape() || p.shape() != b.shape() {
                return Err(shape_err("moment shape differs from parameter shape"));
            }
            if b.data().iter().any(|x| *x < 0.0) {
                return Err(invalid("second moment must be nonnegative"));
            }
        }
        s.m = m;
        s.v = v;
        s.t = t;
        Ok(s)
    }

    pub fn decays(&self, idx: usize) -> bool {
        self.decay[idx]
    }

    /// One update in the order: decoupled decay, moment updates, bias-corrected
    /// step.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err(format!(
                "expected {} parameters and gradients, got {} and {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err(format!("gradient {:?} vs weight {:?}", g.shape(), p.shape())));
            }
        }
        self.t += 1;
        let h = self.hyper;
        let t = self.t as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { h.lr * h.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= decay * *w;
                *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
                *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }

    /// Entrywise derivative of `m_t / (√v_t + ε)` with respect to the
    /// gradient, evaluated at the moments the next step would produce for
    /// gradient `g`:
    /// `(1−β₁)/(√v_t+ε) − (1−β₂)·m_t·g / (√v_t·(√v_t+ε)²)`.
    /// Where `v_t = 0` the second term is taken as 0.
    pub fn update_sensitivity(&self, idx: usize, g: &Tensor) -> Result<Tensor> {
        let m = &self.m[idx];
        let v = &self.v[idx];
        if m.shape() != g.shape() {
            return Err(shape_err(format!("gradient {:?} vs state {:?}", g.shape(), m.shape())));
        }
        let h = self.hyper;
        let data = g
            .data()
            .iter()
            .zip(m.data())
            .zip(v.data())
            .map(|((&gi, &mi), &vi)| {
                let m_t = h.beta1 * mi + (1.0 - h.beta1) * gi;
                let v_t = h.beta2 * vi + (1.0 - h.beta2) * gi * gi;
                sensitivity_entry(&h, m_t, v_t, gi)
            })
            .collect();
        Ok(Tensor::from_parts(g.shape().to_vec(), data))
    }
}

/// The elementwise sensitivity formula for explicit moments.
pub(crate) fn sensitivity_entry(h: &AdamWHyper, m_t: f64, v_t: f64, g: f64) -> f64 {
    let sv = v_t.sqrt();
    let first = (1.0 - h.beta1) / (sv + h.eps);
    let second = if sv > 0.0 {
        (1.0 - h.beta2) * m_t * g / (sv * (sv + h.eps) * (sv + h.eps))
    } else {
        0.0
    };
    first - second
}
