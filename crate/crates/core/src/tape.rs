//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs precede it, so replaying the
//! node list backwards is a valid topological order. A tape supports one
//! backward pass; it is then marked consumed.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Affine(Var, f64),
    Sqrt(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    StackCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lengths: Vec<usize>,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        _ => shape[..shape.len() - 1].iter().product(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated into `v` by [`Tape::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, or zeros when no path from the loss reached it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        (rows_of(s), cols_of(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(name, &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str, sign: f64, op: Op) -> Result<Var> {
        let n = cols_of(&self.nodes[x.0].shape);
        if self.nodes[r.0].value.len() != n {
            return Err(Error::shape(name, &self.nodes[x.0].shape, &self.nodes[r.0].shape));
        }
        let rv = &self.nodes[r.0].value;
        let out = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + sign * rv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, rg, op))
    }

    /// Adds the vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "add_row", 1.0, Op::AddRow(x, r))
    }

    /// Subtracts the vector `r` from every row of `x`.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "sub_row", -1.0, Op::SubRow(x, r))
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| a * v + b).collect();
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, rg, Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("sqrt of a negative value".into()));
        }
        let out = self.nodes[x.0].value.iter().map(|v| v.sqrt()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, rg, Op::Sqrt(x)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, rg, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    /// Per-row sums: `[m×n] → [m]`.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let v = &self.nodes[x.0].value;
        let out = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(vec![m], out, rg, Op::RowSums(x))
    }

    /// Column means over all rows: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if m == 0 {
            return Err(Error::Invalid("mean over zero rows".into()));
        }
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&v[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n], out, rg, Op::MeanRows(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + len > m {
            return Err(Error::shape("slice_rows", &self.nodes[x.0].shape, &[start, len]));
        }
        let out = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, n], out, rg, Op::SliceRows(x, start)))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(p) => cols_of(&self.nodes[p.0].shape),
            None => return Err(Error::Invalid("concat of zero tensors".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (m, c) = self.dims2(*p);
            if c != n {
                return Err(Error::shape("concat_rows", &[n], &self.nodes[p.0].shape));
            }
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += m;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(vec![rows, n], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Places `k` vectors of length `m` side by side as the columns of an `m×k` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let m = match cols.first() {
            Some(c) => self.nodes[c.0].value.len(),
            None => return Err(Error::Invalid("stack of zero tensors".into())),
        };
        let k = cols.len();
        let mut out = vec![0.0; m * k];
        for (j, c) in cols.iter().enumerate() {
            let v = &self.nodes[c.0].value;
            if v.len() != m {
                return Err(Error::shape("stack_cols", &[m], &self.nodes[c.0].shape));
            }
            for i in 0..m {
                out[i * k + j] = v[i];
            }
        }
        let rg = cols.iter().any(|c| self.rg(*c));
        Ok(self.push(vec![m, k], out, rg, Op::StackCols(cols.to_vec())))
    }

    /// Selects rows of `x` by index (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Invalid(format!("row index {id} out of range for {m} rows")));
            }
            out.extend_from_slice(&v[id * n..(id + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![ids.len(), n], out, rg, Op::GatherRows(x, ids.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let out = crate::tensor::transpose(&self.nodes[x.0].value, m, n);
        let rg = self.rg(x);
        self.push(vec![n, m], out, rg, Op::Transpose(x))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(Error::shape("reshape", &self.nodes[x.0].shape, shape));
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(x)))
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if n == 0 {
            return Err(Error::Invalid("softmax of an empty tensor".into()));
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, rg, Op::Softmax(x)))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.nodes[gamma.0].value.len() != n || self.nodes[beta.0].value.len() != n {
            return Err(Error::shape("layer_norm", &self.nodes[x.0].shape, &self.nodes[gamma.0].shape));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `[(batch·seq_len) × d]`; sequence `b` occupies rows
    /// `b·seq_len .. (b+1)·seq_len` and only its first `lengths[b]` positions
    /// are valid. Keys at invalid positions get zero weight and outputs at
    /// invalid positions are zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lengths: &[usize], seq_len: usize, n_heads: usize) -> Result<Var> {
        let shape = self.nodes[q.0].shape.clone();
        if self.nodes[k.0].shape != shape || self.nodes[v.0].shape != shape || shape.len() != 2 {
            return Err(Error::shape("attention", &shape, &self.nodes[k.0].shape));
        }
        let (rows, d) = (shape[0], shape[1]);
        if rows != lengths.len() * seq_len || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape("attention", &shape, &[lengths.len(), seq_len, n_heads]));
        }
        if lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::Invalid("attention lengths must lie in 1..=seq_len".into()));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut probs = vec![0.0; lengths.len() * n_heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for (b, &len) in lengths.iter().enumerate() {
            let base = b * seq_len;
            for h in 0..n_heads {
                let off = h * dh;
                let pbase = (b * n_heads + h) * seq_len * seq_len;
                for i in 0..len {
                    let qi = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                    let p = &mut probs[pbase + i * seq_len..pbase + i * seq_len + len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                        let mut s = 0.0;
                        for (a, c) in qi.iter().zip(kj) {
                            s += a * c;
                        }
                        *pj = s * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                lengths: lengths.to_vec(),
                seq_len,
                n_heads,
                probs,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[m×k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2(logits);
        if self.nodes[logits.0].shape.len() != 2 || targets.len() != m || m == 0 {
            return Err(Error::shape("cross_entropy", &self.nodes[logits.0].shape, &[targets.len()]));
        }
        if targets.iter().any(|&t| t >= k) {
            return Err(Error::Invalid("cross-entropy target out of range".into()));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss / m as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        // Split borrows: nodes are read, grads are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = cols_of(&self.nodes[b.0].shape);
                if self.rg(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    matmul_nt_acc(g, &bv, m, n, k, self.acc(*a).unwrap());
                    self.nodes[b.0].value = bv;
                }
                if self.rg(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    matmul_tn_acc(&av, g, m, k, n, self.acc(*b).unwrap());
                    self.nodes[a.0].value = av;
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = self.acc(v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = self.acc(v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.acc(*a).unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.acc(*b).unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if let Some(ga) = self.acc(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddRow(x, r) | Op::SubRow(x, r) => {
                let sign = if matches!(op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let n = self.nodes[r.0].value.len();
                if let Some(gr) = self.acc(*r) {
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % n] += sign * gi;
                    }
                }
            }
            Op::Affine(x, a) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(v, y)| *v += a * y);
                }
            }
            Op::Sqrt(x) => {
                let out = self.nodes[idx].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for i in 0..g.len() {
                        // Subgradient 0 at the origin.
                        if out[i] > 0.0 {
                            gx[i] += g[i] * 0.5 / out[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for i in 0..g.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::RowSums(x) => {
                let (_, n) = self.dims2(*x);
                if let Some(gx) = self.acc(*x) {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i / n];
                    }
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.dims2(*x);
                if let Some(gx) = self.acc(*x) {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i % n] / m as f64;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let n = cols_of(&self.nodes[x.0].shape);
                if let Some(gx) = self.acc(*x) {
                    let dst = &mut gx[start * n..start * n + g.len()];
                    dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(*p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::StackCols(cols) => {
                let k = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    if let Some(gc) = self.acc(*c) {
                        for (i, v) in gc.iter_mut().enumerate() {
                            *v += g[i * k + j];
                        }
                    }
                }
            }
            Op::GatherRows(x, ids) => {
                let n = cols_of(&self.nodes[x.0].shape);
                if let Some(gx) = self.acc(*x) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * n..(r + 1) * n];
                        gx[id * n..(id + 1) * n].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims2(*x);
                if let Some(gx) = self.acc(*x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims2(*x);
                let p = self.nodes[idx].value.clone();
                if let Some(gx) = self.acc(*x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = p[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            gx[j] += p[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims2(*x);
                let gv = self.nodes[gamma.0].value.clone();
                if let Some(gg) = self.acc(*gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(*beta) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            gx[i * n + j] += inv_std[i] / nf * (nf * dh - sum_d - xhat[i * n + j] * sum_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                lengths,
                seq_len,
                n_heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, lengths, *seq_len, *n_heads, probs),
            Op::CrossEntropy { logits, targets, probs } => {
                let (m, k) = self.dims2(*logits);
                if let Some(gl) = self.acc(*logits) {
                    for i in 0..m {
                        for j in 0..k {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            gl[i * k + j] += g[0] * (probs[i * k + j] - onehot) / m as f64;
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        seq_len: usize,
        n_heads: usize,
        probs: &[f64],
    ) {
        let d = cols_of(&self.nodes[q.0].shape);
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = self.nodes[q.0].value.len() / d;
        let qv = self.nodes[q.0].value.clone();
        let kv = self.nodes[k.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let need_qk = self.rg(q) || self.rg(k);
        let mut dp = vec![0.0; seq_len];
        for (b, &len) in lengths.iter().enumerate() {
            let base = b * seq_len;
            for h in 0..n_heads {
                let off = h * dh;
                let pbase = (b * n_heads + h) * seq_len * seq_len;
                for i in 0..len {
                    let p = &probs[pbase + i * seq_len..pbase + i * seq_len + len];
                    let go = &g[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..len {
                        let row = (base + j) * d + off;
                        let vj = &vv[row..row + dh];
                        let mut s = 0.0;
                        for (a, c) in go.iter().zip(vj) {
                            s += a * c;
                        }
                        dp[j] = s;
                        let dvj = &mut dv[row..row + dh];
                        for (o, a) in dvj.iter_mut().zip(go) {
                            *o += p[j] * a;
                        }
                    }
                    if !need_qk {
                        continue;
                    }
                    let dot: f64 = p.iter().zip(&dp[..len]).map(|(a, b)| a * b).sum();
                    let qrow = (base + i) * d + off;
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (base + j) * d + off;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kv[krow + c];
                            dk[krow + c] += ds * qv[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(var) {
                acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
            }
        }
    }
}
