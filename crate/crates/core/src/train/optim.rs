use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One decoupled AdamW update of `theta` in place; `t` is the 1-based step.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], state: &mut Moments, t: u64, lr: f64, weight_decay: f64) {
    if state.m.len() != theta.len() {
        state.m = vec![0.0; theta.len()];
        state.v = vec![0.0; theta.len()];
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for (((w, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * *w);
    }
}

/// AdamW over a fixed, ordered parameter list. Only tensors that are
/// trainable and carry a gradient are touched.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    state: Vec<Moments>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one step. Every gradient is checked before any parameter
    /// changes, so a non-finite gradient leaves the model untouched.
    pub fn step<'a, I>(&mut self, params: I, lr: f64, weight_decay: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, t) in &params {
            if let Some(g) = t.grad() {
                if g.len() != t.numel() {
                    return Err(Error::shape("adamw_step", t.shape(), &[g.len()]));
                }
                if t.requires_grad() && g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient((*name).to_owned()));
                }
            }
        }
        if self.state.len() < params.len() {
            self.state.resize(params.len(), Moments::default());
        }
        self.t += 1;
        for (slot, (_, t)) in params.into_iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            adamw_update(t.data_mut(), &grad, &mut self.state[slot], self.t, lr, weight_decay);
            t.grad = Some(grad);
        }
        Ok(())
    }
}
