//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`GradientTape`]; each
//! returns a [`Var`] handle to its output node. [`GradientTape::backward`]
//! walks the nodes in reverse recording order and accumulates adjoints, so a
//! leaf used several times in one graph receives the sum of all its uses.
//! The tape is left untouched by `backward`, and replaying it yields the same
//! gradients bit for bit.

use super::value::{axis_split, kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    MulScalar { x: Var, s: Var },
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmaxRows { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    MseRows { pred: Var, target: Tensor, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt: {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul_nt", value, &[a, b], Op::MatMulNT(a, b))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims2(x)?;
        let (k2, n) = self.dims2(w)?;
        if k != k2 {
            return Err(Error::dim(format!("linear: input {m}x{k} vs weight {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return Err(Error::dim(format!("linear: bias of {} for {n} outputs", bias.len())));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::mm(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push("linear", value, &inputs, Op::Linear { x, w, b })
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{name}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x)?;
        if self.value(row).numel() != cols {
            return Err(Error::dim(format!("add_row: {} values for {cols} columns", self.value(row).numel())));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("add_row", value, &[x, row], Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, &[x], Op::Scale(x, c))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", value, &[x, s], Op::MulScalar { x, s })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", value, &[x], Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, &[x], Op::Clamp { x, lo, hi })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", value, &[x], Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = super::value::softmax(self.value(x), axis)?;
        self.push("softmax", value, &[x], Op::Softmax { x, axis })
    }

    /// Row softmax of a matrix; columns with `keep[j] == false` receive
    /// exactly zero probability.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if keep.len() != cols {
            return Err(Error::dim(format!("mask of {} for {cols} columns", keep.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Degenerate("every attention key is masked".into()));
        }
        let mut out = vec![0.0; rows * cols];
        kernels::masked_softmax_rows(self.value(x).data(), &mut out, rows, cols, keep);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("masked_softmax", value, &[x], Op::MaskedSoftmaxRows { x, keep: keep.to_vec() })
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::dim(format!("layer_norm: affine params must have {cols} entries")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (xr[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!("slice_cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        self.push("slice_cols", value, &[x], Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(*parts.first().ok_or_else(|| Error::dim("concat of nothing"))?)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims2(*parts.first().ok_or_else(|| Error::dim("concat of nothing"))?)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push("concat_rows", value, parts, Op::ConcatRows(parts.to_vec()))
    }

    /// Row lookup `table[idx[i]]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table)?;
        if idx.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(idx.len(), cols, out)?;
        self.push("gather_rows", value, &[table], Op::GatherRows { table, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push("mean", value, &[x], Op::Mean(x))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &src[r * cols..(r + 1) * cols];
            let n = kernels::dot(xr, xr).sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            norms.push(n);
            for j in 0..cols {
                out[r * cols + j] = xr[j] / n;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("l2_normalize_rows", value, &[x], Op::L2NormalizeRows { x, norms })
    }

    /// Mean over `(row, class)` pairs of `logsumexp(logits[row]) - logits[row][class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.is_empty() {
            return Err(Error::Contract("cross entropy over an empty target set".into()));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0;
        for &(r, c) in targets {
            if r >= rows || c >= cols {
                return Err(Error::dim(format!("target ({r},{c}) outside {rows}x{cols} logits")));
            }
            let lr = &src[r * cols..(r + 1) * cols];
            let lse = kernels::logsumexp(lr);
            total += lse - lr[c];
            probs.extend(lr.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push("cross_entropy", value, &[logits], Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Mean squared error between `pred` and `target` over the listed rows.
    pub fn mse_rows(&mut self, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(format!("mse: prediction {:?} vs target {:?}", self.shape(pred), target.shape())));
        }
        if rows.is_empty() {
            return Err(Error::Contract("mse over an empty row set".into()));
        }
        let (n, cols) = target.dims2()?;
        let p = self.value(pred).data();
        let mut total = 0.0;
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("row {r} out of range for {n} rows")));
            }
            for j in 0..cols {
                let d = p[r * cols + j] - target.data()[r * cols + j];
                total += d * d;
            }
        }
        let value = Tensor::scalar(total / (rows.len() * cols) as f64);
        self.push("mse_rows", value, &[pred], Op::MseRows { pred, target: target.clone(), rows: rows.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::mm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::mm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::mm(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::mm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let n = self.value(*w).dims2().unwrap().1;
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::mm_nt(g, self.value(*w).data(), gx, m, n, k);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::mm_tn(self.value(*x).data(), g, gw, m, k, n);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks_exact(n) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                let cols = self.value(*row).numel();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks_exact(cols) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, sv);
                }
                let xv = self.value(*x).data();
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += kernels::dot(g, xv);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *acc += gv * y;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((acc, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v >= *lo && *v <= *hi {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((acc, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((acc, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        *acc += gv * gelu_parts(*v).1;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + j;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += out[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows { x, keep } => {
                let cols = keep.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), acc) in
                        g.chunks_exact(cols).zip(out.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols))
                    {
                        let dot = kernels::dot(gr, yr);
                        for j in 0..cols {
                            acc[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(cols) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for (r, (gr, hr)) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)).enumerate() {
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dh = kernels::dot(&dxhat, hr) / n;
                        let acc = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            acc[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).dims2().unwrap().1;
                let len = node.value.dims2().unwrap().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        axpy(&mut gx[r * cols + start..r * cols + start + len], gr, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().unwrap().1;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().unwrap().1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for (r, gr) in g.chunks_exact(total).enumerate() {
                            axpy(&mut gp[r * w..(r + 1) * w], &gr[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        axpy(gp, &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, idx } => {
                let cols = self.value(*table).dims2().unwrap().1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &row) in idx.iter().enumerate() {
                        axpy(&mut gt[row * cols..(row + 1) * cols], &g[k * cols..(k + 1) * cols], 1.0);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for acc in gx.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for acc in gx.iter_mut() {
                        *acc += g[0] / n;
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = self.value(*x).dims2().unwrap().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gr, yr)) in g.chunks_exact(cols).zip(out.chunks_exact(cols)).enumerate() {
                        let dot = kernels::dot(gr, yr);
                        for j in 0..cols {
                            gx[r * cols + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).dims2().unwrap().1;
                let w = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (k, &(r, c)) in targets.iter().enumerate() {
                        let pr = &probs[k * cols..(k + 1) * cols];
                        let acc = &mut gl[r * cols..(r + 1) * cols];
                        axpy(acc, pr, w);
                        acc[c] -= w;
                    }
                }
            }
            Op::MseRows { pred, target, rows } => {
                let cols = target.dims2().unwrap().1;
                let w = 2.0 * g[0] / (rows.len() * cols) as f64;
                let p = self.value(*pred).data();
                if let Some(gp) = self.acc(grads, *pred) {
                    for &r in rows {
                        for j in 0..cols {
                            let k = r * cols + j;
                            gp[k] += w * (p[k] - target.data()[k]);
                        }
                    }
                }
            }
        }
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn annihilated_loss_has_zero_gradient() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.gelu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let z = tape.scale(s, 0.0).unwrap();
        let g = tape.backward(z).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::vector(vec![2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = GradientTape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let x = tape.param(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.add(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn masked_keys_get_exact_zero() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0, 50.0, -2.0, 0.0, 0.0, 3.0]).unwrap());
        let p = tape.masked_softmax_rows(x, &[true, false, true]).unwrap();
        let v = tape.value(p);
        assert_eq!(v.get2(0, 1), 0.0);
        assert_eq!(v.get2(1, 1), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tape.masked_softmax_rows(x, &[false; 3]).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = GradientTape::new();
        let x = tape.param(Tensor::vector(vec![1000.0]).unwrap());
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = GradientTape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let g1 = tape.constant(Tensor::ones(&[4]));
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g1, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::matrix(1, 4, vec![1.0, -4.0, 2.5, 8.0]).unwrap());
        let g0 = tape.constant(Tensor::zeros(&[4]));
        let beta = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut tape = GradientTape::new();
        let l = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(l, &[(0, 1)]).unwrap();
        let direct = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
        assert!((tape.value(ce).item().unwrap() - direct).abs() < 1e-15);
    }
}
