//! Low-rank adapters: a frozen weight `W₀` plus a trainable update
//! `scaling · A·B` with `A: d×r`, `B: r×d` and `scaling = alpha / r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Dropout applied to the adapter input during training.
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 64.0,
            dropout: 0.1,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            ..LoraConfig::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self, target: LoraTarget) -> bool {
        self.targets.contains(&target)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d_model {
            return Err(Error::Config(format!(
                "lora rank must satisfy 1 <= rank < d_model ({d_model}), got {}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("lora alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets must not be empty".into()));
        }
        Ok(())
    }
}

/// A standalone adapter attached to one frozen square weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn new(base: Tensor, a: Tensor, b: Tensor, scaling: f64) -> Result<Self> {
        let (d_in, d_out) = base.dims2()?;
        let (ar, r) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        if ar != d_in || br != r || bc != d_out {
            return Err(Error::shape("lora adapter", a.shape(), b.shape()));
        }
        Ok(LoraAdapter { base, a, b, scaling })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn trainable_parameters(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `scaling · (x·A)·B`; the caller adds `x·W₀`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(self.scaling))
    }

    /// Full forward through the adapted weight: `x·W₀ + delta(x)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.base)?.add(&self.delta(x)?)
    }
}

/// `W₀ + scaling · A·B`.
pub fn merge_weights(adapter: &LoraAdapter) -> Tensor {
    let ab = adapter
        .a
        .matmul(&adapter.b)
        .expect("adapter shapes were checked at construction");
    adapter
        .base
        .add(&ab.scale(adapter.scaling))
        .expect("adapter shapes were checked at construction")
}

/// Records `scaling · ((x ⊙ mask)·A)·B` on the tape. `dropout_mask`, when
/// given, already carries the `1/(1-p)` rescaling.
pub fn lora_delta(tape: &mut Tape, x: Var, a: Var, b: Var, scaling: f64, dropout_mask: Option<Tensor>) -> Result<Var> {
    let input = match dropout_mask {
        Some(mask) => {
            let m = tape.constant(mask);
            tape.mul(x, m)?
        }
        None => x,
    };
    let xa = tape.matmul(input, a)?;
    let xab = tape.matmul(xa, b)?;
    Ok(tape.scale(xab, scaling))
}
