use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    StopGradient,
    MeanAbsDiff(Var, Var),
    MeanSqDiff(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Recording of one forward pass. Values, gradients and operations live in
/// parallel vectors indexed by [`Var`]; operations are appended in execution
/// order, so the vector order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient after [`Tape::backward`]; `None` when the value does not
    /// depend on any trainable leaf or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor of the value's shape; zeros when disconnected.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = as_matrix(ta);
        let (k2, n) = as_matrix(tb);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let r = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), r))
    }

    /// `a · bᵀ` for `a: M×K`, `b: N×K`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = as_matrix(ta);
        let (n, k2) = as_matrix(tb);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let r = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), r))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(t, op, r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let n = tx.cols();
        if tb.numel() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let r = self.req(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), r))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = &self.values[x.0];
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let r = self.req(&[x]);
        self.push(t, Op::Scale(x, c), r)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let r = self.req(&[x]);
        self.push(t, Op::Relu(x), r)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let r = self.req(&[x]);
        self.push(t, Op::Gelu(x), r)
    }

    /// Row-wise layer norm with learned gain and bias (each length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let tx = &self.values[x.0];
        let (rows, cols) = as_matrix(tx);
        let (tg, tb) = (&self.values[gamma.0], &self.values[beta.0]);
        if tg.numel() != cols || tb.numel() != cols {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut out = vec![0.0; rows * cols];
        let (mean, rstd) =
            kernels::layer_norm_rows(tx.data(), tg.data(), tb.data(), &mut out, rows, cols, 1e-5);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            r,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis of a square score matrix where row `i` may
    /// only attend to columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.values[x.0];
        if tx.rows() != tx.cols() {
            return Err(shape_err("causal_softmax", tx, tx));
        }
        Ok(self.softmax_impl(x, true))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let tx = &self.values[x.0];
        let (rows, cols) = as_matrix(tx);
        let mut data = tx.data().to_vec();
        kernels::softmax_rows(&mut data, rows, cols, causal);
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let r = self.req(&[x]);
        self.push(t, Op::Softmax { x }, r)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = &self.values[x.0];
        let (rows, cols) = as_matrix(tx);
        if start + len > cols {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&tx.data()[i * cols + start..i * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        let r = self.req(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, r))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.values[parts[0].0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.values[p.0];
            if t.rows() != rows {
                return Err(shape_err("concat_cols", &self.values[parts[0].0], t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let r = self.req(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), r))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        let r = self.req(&[x]);
        Ok(self.push(t, Op::Reshape(x), r))
    }

    /// Rows `table[indices[i]]`, stacked.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tt = &self.values[table.0];
        let (n, cols) = as_matrix(tt);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= n {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    lhs: tt.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![indices.len(), cols], data)?;
        let r = self.req(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            r,
        ))
    }

    /// Forward identity, zero gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.values[x.0].clone();
        self.push(t, Op::StopGradient, false)
    }

    /// `mean |a − b|`, subgradient 0 at ties.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mean_abs_diff", ta, tb));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let r = self.req(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), r))
    }

    /// `mean (a − b)²`.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mean_sq_diff", ta, tb));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let r = self.req(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanSqDiff(a, b), r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        let r = self.req(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (L×V).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = &self.values[logits.0];
        let (rows, cols) = as_matrix(tl);
        if rows != targets.len() || targets.iter().any(|&t| t >= cols) {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        kernels::softmax_rows(&mut probs, rows, cols, false);
        let mut nll = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
        }
        let r = self.req(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll / rows.max(1) as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            r,
        ))
    }

    /// Reverse pass from a scalar loss. Each recorded operation runs its
    /// backward rule at most once; gradients accumulate by addition.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.values[loss.0].shape().to_vec(),
            ));
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_op(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, g: &[f64]) {
        let Tape {
            values,
            grads,
            ops,
            requires,
            ..
        } = self;
        macro_rules! buf {
            ($v:expr) => {
                grad_buf(grads, requires, values, $v)
            };
        }
        match &ops[i] {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                if let Some(ga) = buf!(*a) {
                    kernels::matmul_bt_acc(g, bd, ga, m, n, k);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::matmul_at_acc(ad, g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let (ad, bd) = (ta.data(), tb.data());
                if let Some(ga) = buf!(*a) {
                    kernels::matmul_acc(g, bd, ga, m, n, k);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::matmul_at_acc(g, ad, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = buf!(*a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = buf!(*b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let n = values[bias.0].numel();
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(1.0, g, gx);
                }
                if let Some(gb) = buf!(*bias) {
                    for row in g.chunks(n.max(1)) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(c, g, gx);
                }
            }
            Op::Relu(x) => {
                let xd = values[x.0].data();
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = values[x.0].data();
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let tx = &values[x.0];
                let (rows, cols) = (tx.rows(), tx.cols());
                let xd = tx.data();
                let gam = values[gamma.0].data();
                let n = cols as f64;
                let mut xhat = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        xhat[r * cols + c] = (xd[r * cols + c] - mean[r]) * rstd[r];
                    }
                }
                if let Some(gg) = buf!(*gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = buf!(*beta) {
                    for row in g.chunks(cols) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
                if let Some(gx) = buf!(*x) {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            s1 += d;
                            s2 += d * xh[c];
                        }
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            gx[r * cols + c] += rstd[r] / n * (n * d - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &values[i];
                let (rows, cols) = (y.rows(), y.cols());
                let yd = y.data();
                if let Some(gx) = buf!(*x) {
                    for r in 0..rows {
                        let yr = &yd[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = kernels::dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let cols = values[x.0].cols();
                let (rows, len) = (values[i].rows(), values[i].cols());
                if let Some(gx) = buf!(*x) {
                    for r in 0..rows {
                        kernels::axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut gx[r * cols + start..r * cols + start + len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = values[i].rows();
                let total = values[i].cols();
                let mut off = 0;
                for p in parts {
                    let w = values[p.0].cols();
                    if let Some(gp) = buf!(*p) {
                        for r in 0..rows {
                            kernels::axpy(
                                1.0,
                                &g[r * total + off..r * total + off + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(1.0, g, gx);
                }
            }
            Op::Gather { table, indices } => {
                let cols = values[table.0].cols();
                if let Some(gt) = buf!(*table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        kernels::axpy(
                            1.0,
                            &g[r * cols..(r + 1) * cols],
                            &mut gt[idx * cols..(idx + 1) * cols],
                        );
                    }
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let n = values[a.0].numel().max(1) as f64;
                let s = g[0] / n;
                let signs: Vec<f64> = values[a.0]
                    .data()
                    .iter()
                    .zip(values[b.0].data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            s
                        } else if d < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(1.0, &signs, ga);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(-1.0, &signs, gb);
                }
            }
            Op::MeanSqDiff(a, b) => {
                let n = values[a.0].numel().max(1) as f64;
                let s = 2.0 * g[0] / n;
                let diff: Vec<f64> = values[a.0]
                    .data()
                    .iter()
                    .zip(values[b.0].data())
                    .map(|(x, y)| s * (x - y))
                    .collect();
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(1.0, &diff, ga);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(-1.0, &diff, gb);
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(gx) = buf!(*x) {
                    for o in gx.iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = values[logits.0].cols();
                let s = g[0] / targets.len().max(1) as f64;
                if let Some(gl) = buf!(*logits) {
                    kernels::axpy(s, probs, gl);
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * cols + t] -= s;
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    requires: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !requires[v.0] {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 0.0]]));
        let b = tape.constant(t2(&[&[0.0], &[5.0]]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1]);
        assert_eq!(tape.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert_eq!(d[0], 1.0);
        assert!(d[1] < 1e-300);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f64));
        let y = tape.causal_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(&d[1..3], &[0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        for r in 0..3 {
            let s: f64 = d[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn l1_subgradient_signs() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = tape.constant(Tensor::new(vec![4], vec![0.0, 0.0, 4.0, 0.5]).unwrap());
        let l = tape.mean_abs_diff(x, y).unwrap();
        let l = tape.scale(l, 4.0);
        tape.backward(l).unwrap();
        // tie at the last entry gets the zero subgradient
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad_tensor(x).data(), &[0.0; 3]);
    }

    #[test]
    fn x_times_stopped_x_gradient_is_x() {
        let mut tape = Tape::new();
        let vals = vec![0.3, -1.2, 2.5];
        let x = tape.param(Tensor::new(vec![3], vals.clone()).unwrap());
        let s = tape.stop_gradient(x);
        let p = tape.mul(x, s).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vals.as_slice());
    }

    #[test]
    fn backward_twice_rejected_and_nonscalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn reused_value_accumulates() {
        // f(x) + f(x) must produce twice the gradient of f(x)
        let base = vec![0.4, -0.7, 1.1];
        let grad_of = |twice: bool| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(vec![1, 3], base.clone()).unwrap());
            let y = tape.gelu(x);
            let f = tape.sum(y);
            let l = if twice { tape.add(f, f).unwrap() } else { f };
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let one = grad_of(false);
        let two = grad_of(true);
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn disconnected_param_keeps_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::scalar(5.0));
        let l = tape.scale(x, 3.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.grad_tensor(unused).data(), &[0.0]);
    }
}
