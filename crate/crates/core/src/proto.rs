//! Distance-based classification against per-class prototypes, plus the
//! linear head used by the parametric fine-tuning variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

/// One mean embedding per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub positive: Tensor,
    pub negative: Tensor,
    pub support_counts: (usize, usize),
}

/// Mean over the rows of a `[n × d]` support matrix.
///
/// Each column is summed in sorted order, so the result is bit-identical for
/// every ordering of the support rows.
pub fn compute_prototype(support: &Tensor) -> Result<Tensor> {
    let (n, d) = support.dims2()?;
    if n == 0 || support.numel() == 0 {
        return Err(Error::Invalid("cannot build a prototype from an empty support set".into()));
    }
    let mut column = vec![0.0; n];
    let out = (0..d)
        .map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = support.data()[i * d + j];
            }
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n as f64
        })
        .collect();
    Ok(Tensor::vector(out))
}

impl Prototypes {
    /// Splits embedding rows by label and averages each class.
    pub fn from_embeddings(embeddings: &Tensor, labels: &[Label]) -> Result<Self> {
        let (n, d) = embeddings.dims2()?;
        if n != labels.len() {
            return Err(Error::shape("prototypes", embeddings.shape(), &[labels.len()]));
        }
        let pick = |want: Label| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = (0..n)
                .filter(|&i| labels[i] == want)
                .map(|i| embeddings.row(i).to_vec())
                .collect();
            if rows.is_empty() {
                return Err(Error::Data(format!("support set has no {want} examples")));
            }
            compute_prototype(&Tensor::from_rows(&rows)?)
        };
        let positive = pick(Label::Positive)?;
        let negative = pick(Label::Negative)?;
        let n_pos = labels.iter().filter(|l| l.is_positive()).count();
        debug_assert_eq!(positive.numel(), d);
        Ok(Prototypes {
            positive,
            negative,
            support_counts: (n_pos, n - n_pos),
        })
    }

    pub fn get(&self, label: Label) -> &Tensor {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean `‖h − p‖₂` or cosine `1 − h·p / (‖h‖‖p‖)`.
pub fn distance(h: &[f64], p: &[f64], metric: DistanceMetric) -> Result<f64> {
    if h.len() != p.len() {
        return Err(Error::shape("distance", &[h.len()], &[p.len()]));
    }
    match metric {
        DistanceMetric::Euclidean => Ok(h.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
        DistanceMetric::Cosine => {
            let (nh, np) = (norm(h), norm(p));
            if nh == 0.0 || np == 0.0 {
                return Err(Error::Invalid("cosine distance to a zero vector is undefined".into()));
            }
            let dot: f64 = h.iter().zip(p).map(|(a, b)| a * b).sum();
            Ok(1.0 - dot / (nh * np))
        }
    }
}

/// `(p_pos, p_neg)`: softmax over negated distances to the two prototypes.
pub fn class_probabilities(h: &[f64], protos: &Prototypes, metric: DistanceMetric) -> Result<(f64, f64)> {
    let d_pos = distance(h, protos.positive.data(), metric)?;
    let d_neg = distance(h, protos.negative.data(), metric)?;
    let mut logits = [-d_pos, -d_neg];
    crate::tensor::softmax_in_place(&mut logits);
    Ok((logits[0], logits[1]))
}

/// Nearest prototype; exact ties go to the negative class.
pub fn classify(h: &[f64], protos: &Prototypes, metric: DistanceMetric) -> Result<Label> {
    let d_pos = distance(h, protos.positive.data(), metric)?;
    let d_neg = distance(h, protos.negative.data(), metric)?;
    Ok(if d_pos < d_neg { Label::Positive } else { Label::Negative })
}

/// Prototypes recorded on a tape so the loss differentiates through the
/// support embeddings.
#[derive(Clone, Copy, Debug)]
pub struct TapePrototypes {
    pub positive: Var,
    pub negative: Var,
}

impl TapePrototypes {
    pub fn from_support(tape: &mut Tape, support: Var, labels: &[Label]) -> Result<Self> {
        let pick = |tape: &mut Tape, want: Label| -> Result<Var> {
            let ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
            if ids.is_empty() {
                return Err(Error::Data(format!("support set has no {want} examples")));
            }
            let rows = tape.gather_rows(support, &ids)?;
            tape.mean_rows(rows)
        };
        Ok(TapePrototypes {
            positive: pick(tape, Label::Positive)?,
            negative: pick(tape, Label::Negative)?,
        })
    }
}

/// Distances from every row of `queries` (`[q × d]`) to `proto` (`[d]`), as `[q]`.
pub fn tape_distances(tape: &mut Tape, queries: Var, proto: Var, metric: DistanceMetric) -> Result<Var> {
    let q = tape.shape(queries)[0];
    match metric {
        DistanceMetric::Euclidean => {
            let diff = tape.sub_row(queries, proto)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.row_sums(sq);
            tape.sqrt(s)
        }
        DistanceMetric::Cosine => {
            let d = tape.value(proto).len();
            if norm(tape.value(proto)) == 0.0 {
                return Err(Error::Invalid("cosine distance to a zero prototype is undefined".into()));
            }
            let qv = tape.value(queries);
            if (0..q).any(|i| norm(&qv[i * d..(i + 1) * d]) == 0.0) {
                return Err(Error::Invalid("cosine distance from a zero embedding is undefined".into()));
            }
            let p_col = tape.reshape(proto, &[d, 1])?;
            let dots = tape.matmul(queries, p_col)?;
            let qq = tape.mul(queries, queries)?;
            let qn = tape.row_sums(qq);
            let qn = tape.sqrt(qn)?;
            let qn = tape.reshape(qn, &[q, 1])?;
            let pp = tape.mul(proto, proto)?;
            let pn = tape.sum(pp);
            let pn = tape.sqrt(pn)?;
            let pn = tape.reshape(pn, &[1, 1])?;
            let denom = tape.matmul(qn, pn)?;
            let cos = tape.div(dots, denom)?;
            let dist = tape.affine(cos, -1.0, 1.0);
            tape.reshape(dist, &[q])
        }
    }
}

/// Mean cross-entropy of the query labels under softmax over negated
/// prototype distances.
pub fn episode_loss(
    tape: &mut Tape,
    queries: Var,
    labels: &[Label],
    protos: &TapePrototypes,
    metric: DistanceMetric,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Invalid("episode has an empty query set".into()));
    }
    if tape.shape(queries).len() != 2 || tape.shape(queries)[0] != labels.len() {
        return Err(Error::shape("episode_loss", tape.shape(queries), &[labels.len()]));
    }
    let d_pos = tape_distances(tape, queries, protos.positive, metric)?;
    let d_neg = tape_distances(tape, queries, protos.negative, metric)?;
    let stacked = tape.stack_cols(&[d_pos, d_neg])?;
    let logits = tape.scale(stacked, -1.0);
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    tape.cross_entropy(logits, &targets)
}

/// Dense two-way classifier `h·W + b`; column 0 scores the positive class.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn zeros(d: usize) -> Self {
        LinearHead {
            weight: Tensor::zeros(&[d, 2]).with_requires_grad(true),
            bias: Tensor::zeros(&[2]).with_requires_grad(true),
        }
    }

    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let data = (0..d * 2).map(|_| normal.sample(&mut rng)).collect();
        LinearHead {
            weight: Tensor::new(vec![d, 2], data).expect("shape").with_requires_grad(true),
            bias: Tensor::zeros(&[2]).with_requires_grad(true),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Logits for a single embedding.
    pub fn logits(&self, h: &[f64]) -> Result<[f64; 2]> {
        if h.len() != self.dim() {
            return Err(Error::shape("linear_head", &[h.len()], self.weight.shape()));
        }
        let mut out = [self.bias.data()[0], self.bias.data()[1]];
        for (i, x) in h.iter().enumerate() {
            out[0] += x * self.weight.get2(i, 0);
            out[1] += x * self.weight.get2(i, 1);
        }
        Ok(out)
    }

    pub fn probabilities(&self, h: &[f64]) -> Result<(f64, f64)> {
        let mut l = self.logits(h)?;
        crate::tensor::softmax_in_place(&mut l);
        Ok((l[0], l[1]))
    }

    /// Argmax with ties to the negative class.
    pub fn classify(&self, h: &[f64]) -> Result<Label> {
        let l = self.logits(h)?;
        Ok(if l[0] > l[1] { Label::Positive } else { Label::Negative })
    }

    /// Records `[n × 2]` logits for a batch of embeddings.
    pub fn tape_logits(tape: &mut Tape, h: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = tape.matmul(h, weight)?;
        tape.add_row(z, bias)
    }
}

pub fn linear_head_logits(h: &Tensor, head: &LinearHead) -> Result<Tensor> {
    let l = head.logits(h.data())?;
    Ok(Tensor::vector(l.to_vec()))
}
