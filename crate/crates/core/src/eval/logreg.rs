use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::proto::LinearHead;
use crate::tensor::{matmul_tn_acc, Tensor};

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 5000;
const POWER_ITERS: usize = 200;

/// Result of fitting the two-way linear head.
#[derive(Clone, Debug)]
pub struct LogRegFit {
    pub head: LinearHead,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Summed cross-entropy plus `‖W‖² / (2C)`; the bias is not penalized.
pub fn logistic_objective(x: &Tensor, labels: &[Label], head: &LinearHead, l2_c: f64) -> Result<f64> {
    let (n, _) = x.dims2()?;
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate().take(n) {
        let z = head.logits(x.row(i))?;
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        loss += lse - z[label.index()];
    }
    let reg: f64 = head.weight.data().iter().map(|w| w * w).sum();
    Ok(loss + reg / (2.0 * l2_c))
}

/// Full-batch gradient descent with step `1/L`, where `L` bounds the
/// objective's curvature. Stops at gradient norm ≤ 1e-6 or 5000 iterations.
pub fn logistic_regression_fit(x: &Tensor, labels: &[Label], l2_c: f64) -> Result<LogRegFit> {
    let (n, d) = x.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("logistic_regression_fit", x.shape(), &[labels.len()]));
    }
    if !(l2_c > 0.0 && l2_c.is_finite()) {
        return Err(Error::Config(format!("l2_c must be positive, got {l2_c}")));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    if n < 2 || n_pos == 0 || n_pos == n {
        return Err(Error::Data("logistic regression needs both classes present".into()));
    }
    if !x.is_finite() {
        return Err(Error::Data("non-finite feature values".into()));
    }
    // Each sample's Hessian block is bounded by (1/2)·x̃x̃ᵀ with x̃ = [x, 1].
    let lipschitz = 0.5 * largest_gram_eigenvalue(x) + 1.0 / l2_c;
    let step = 1.0 / lipschitz;

    let mut head = LinearHead::zeros(d);
    let mut gw = vec![0.0; d * 2];
    let mut resid = vec![0.0; n * 2];
    let mut iterations = 0;
    let mut gradient_norm;
    loop {
        // Residuals p - onehot(y) per sample.
        for i in 0..n {
            let z = head.logits(x.row(i))?;
            let mut p = z;
            crate::tensor::softmax_in_place(&mut p);
            resid[i * 2] = p[0];
            resid[i * 2 + 1] = p[1];
            resid[i * 2 + labels[i].index()] -= 1.0;
        }
        gw.iter_mut().for_each(|g| *g = 0.0);
        matmul_tn_acc(x.data(), &resid, n, d, 2, &mut gw);
        for (g, w) in gw.iter_mut().zip(head.weight.data()) {
            *g += w / l2_c;
        }
        let mut gb = [0.0; 2];
        for r in resid.chunks_exact(2) {
            gb[0] += r[0];
            gb[1] += r[1];
        }
        gradient_norm = (gw.iter().chain(&gb).map(|g| g * g).sum::<f64>()).sqrt();
        if gradient_norm <= GRAD_TOL || iterations == MAX_ITERS {
            break;
        }
        for (w, g) in head.weight.data_mut().iter_mut().zip(&gw) {
            *w -= step * g;
        }
        for (b, g) in head.bias.data_mut().iter_mut().zip(gb) {
            *b -= step * g;
        }
        iterations += 1;
    }
    let objective = logistic_objective(x, labels, &head, l2_c)?;
    Ok(LogRegFit {
        head,
        objective,
        gradient_norm,
        iterations,
    })
}

/// Largest eigenvalue of `X̃ᵀX̃` for `X̃ = [X, 1]`, by power iteration from a
/// fixed start, inflated slightly so the step stays conservative.
fn largest_gram_eigenvalue(x: &Tensor) -> f64 {
    let (n, d) = x.dims2().expect("matrix");
    let cols = d + 1;
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut lambda = 0.0;
    let mut xv = vec![0.0; n];
    for _ in 0..POWER_ITERS {
        for (i, out) in xv.iter_mut().enumerate() {
            let row = x.row(i);
            *out = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut w = vec![0.0; cols];
        for (i, s) in xv.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(x.row(i)) {
                *wj += xj * s;
            }
            w[d] += s;
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda * 1.01
}
