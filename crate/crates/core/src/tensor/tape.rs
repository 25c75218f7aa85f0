use super::kernels::{
    dot, gelu, gelu_grad, log_sum_exp, mm_acc, mm_nt_acc, mm_tn_acc, softmax_into,
};
use super::{expect_matrix, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    AddBias { a: Var, bias: Var },
    RowScale { a: Var, s: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LogSumExp { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<(usize, usize)> },
    RowSum { a: Var },
    Recip { a: Var },
    Sum { a: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation. Nodes are stored in
/// creation order, which is a valid topological order for the reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients are accumulated for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut value = Tensor::from_parts(shape, data);
        value.set_requires_grad(inputs.iter().any(|&i| self.requires_grad(i)));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        expect_matrix(op, self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_t", a)?;
        let (n, k2) = self.matrix("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b }, &[a, b]))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add { a, b }, a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub { a, b }, a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul { a, b }, a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::AddScalar { a }, &[a])
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix("add_bias", a)?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(vec![m, n], out, Op::AddBias { a, bias }, &[a, bias]))
    }

    /// Multiplies row `i` of an `m×n` matrix by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix("row_scale", a)?;
        if self.shape(s) != [m] {
            return Err(shape_err("row_scale", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut out = self.value(a).data().to_vec();
        for (row, c) in out.chunks_mut(n).zip(sv) {
            for o in row.iter_mut() {
                *o *= c;
            }
        }
        Ok(self.push(vec![m, n], out, Op::RowScale { a, s }, &[a, s]))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Gelu { a }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("softmax_rows", a)?;
        let mut out = vec![0.0; m * n];
        for (x, o) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(x, o);
        }
        Ok(self.push(vec![m, n], out, Op::Softmax { a }, &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("log_softmax_rows", a)?;
        let mut out = vec![0.0; m * n];
        for (x, o) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            let lse = log_sum_exp(x);
            for (ov, xv) in o.iter_mut().zip(x) {
                *ov = xv - lse;
            }
        }
        Ok(self.push(vec![m, n], out, Op::LogSoftmax { a }, &[a]))
    }

    /// Row-wise log Σ exp, `[m×n] → [m]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("log_sum_exp_rows", a)?;
        let out = self.value(a).data().chunks(n).map(log_sum_exp).collect();
        Ok(self.push(vec![m], out, Op::LogSumExp { a }, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.value(x).data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Stacks matrices along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            vec![rows, n],
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Concatenates matrices along the hidden (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            vec![m, total],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_rows", a)?;
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "slice_rows range {start}..{end} invalid for {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], data, Op::SliceRows { a, start }, &[a]))
    }

    /// Selects rows by index (repeats allowed). Embedding lookup is this op
    /// applied to a table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            vec![idx.len(), n],
            data,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Places row `r` of `a` at row `idx[r]` of a zero `rows×n` matrix
    /// (accumulating on repeated indices).
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.matrix("scatter_rows", a)?;
        if idx.len() != m {
            return Err(shape_err("scatter_rows", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "scatter_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..n {
                data[i * n + c] += src[r * n + c];
            }
        }
        Ok(self.push(
            vec![rows, n],
            data,
            Op::ScatterRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Extracts the listed `(row, col)` entries as a vector.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.matrix("pick", a)?;
        if idx.is_empty() {
            return Err(Error::Empty("pick"));
        }
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::Contract(format!(
                "pick index ({r},{c}) out of range for {m}x{n}"
            )));
        }
        let v = self.value(a);
        let data = idx.iter().map(|&(r, c)| v.at(r, c)).collect();
        Ok(self.push(
            vec![idx.len()],
            data,
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("row_sum", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        Ok(self.push(vec![m], data, Op::RowSum { a }, &[a]))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| 1.0 / x).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Recip { a }, &[a])
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multi-head causal scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[R×d]` with `R = Σ segments`; each segment is an
    /// independent sequence and attends only within itself, to positions at or
    /// before the query.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (r, d) = self.matrix("causal_attention", q)?;
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != r || segments.contains(&0) {
            return Err(shape_err("causal_attention", &[r, d], segments));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; r * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut off = 0;
        for &n in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![0.0; n * n];
                let mut scores = vec![0.0; n];
                for i in 0..n {
                    let qi = &qd[(off + i) * d + c0..(off + i) * d + c0 + dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                        *s = scale * dot(qi, kj);
                    }
                    softmax_into(&scores[..=i], &mut p[i * n..i * n + i + 1]);
                    let orow = &mut out[(off + i) * d + c0..(off + i) * d + c0 + dh];
                    for j in 0..=i {
                        let pij = p[i * n + j];
                        let vj = &vd[(off + j) * d + c0..(off + j) * d + c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
            off += n;
        }
        Ok(self.push(
            vec![r, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients of every node reachable
    /// backwards from `loss` that requires grad are stored on the node and can
    /// be read with [`Tape::grad`]. Fan-out contributions add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad() {
                self.backprop_node(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            let keep = node.value.requires_grad() && g.is_some();
            node.value.set_grad(if keep { g } else { None });
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                self.acc(grads, *a, |g| mm_nt_acc(gy, self.value(*b).data(), g, m, n, k));
                self.acc(grads, *b, |g| mm_tn_acc(self.value(*a).data(), gy, g, m, k, n));
            }
            Op::MatMulT { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                self.acc(grads, *a, |g| mm_acc(gy, self.value(*b).data(), g, m, n, k));
                self.acc(grads, *b, |g| mm_tn_acc(gy, self.value(*a).data(), g, m, n, k));
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| {
                    for (gv, d) in g.iter_mut().zip(gy) {
                        *gv -= d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((gv, d), x) in g.iter_mut().zip(gy).zip(bv) {
                        *gv += d * x;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((gv, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *gv += d * x;
                    }
                });
            }
            Op::Scale { a, c } => self.acc(grads, *a, |g| {
                for (gv, d) in g.iter_mut().zip(gy) {
                    *gv += c * d;
                }
            }),
            Op::AddScalar { a } => self.acc(grads, *a, |g| add_into(g, gy)),
            Op::AddBias { a, bias } => {
                let n = y.cols();
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *bias, |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::RowScale { a, s } => {
                let n = y.cols();
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                self.acc(grads, *a, |g| {
                    for ((grow, drow), c) in g.chunks_mut(n).zip(gy.chunks(n)).zip(sv) {
                        for (gv, d) in grow.iter_mut().zip(drow) {
                            *gv += c * d;
                        }
                    }
                });
                self.acc(grads, *s, |g| {
                    for ((gv, drow), arow) in g.iter_mut().zip(gy.chunks(n)).zip(av.chunks(n)) {
                        *gv += dot(drow, arow);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((gv, d), xv) in g.iter_mut().zip(gy).zip(x) {
                        *gv += d * gelu_grad(*xv);
                    }
                });
            }
            Op::Softmax { a } => {
                let n = y.cols();
                self.acc(grads, *a, |g| {
                    for ((grow, drow), prow) in
                        g.chunks_mut(n).zip(gy.chunks(n)).zip(y.data().chunks(n))
                    {
                        let s = dot(drow, prow);
                        for ((gv, d), p) in grow.iter_mut().zip(drow).zip(prow) {
                            *gv += p * (d - s);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let n = y.cols();
                self.acc(grads, *a, |g| {
                    for ((grow, drow), lrow) in
                        g.chunks_mut(n).zip(gy.chunks(n)).zip(y.data().chunks(n))
                    {
                        let s: f64 = drow.iter().sum();
                        for ((gv, d), l) in grow.iter_mut().zip(drow).zip(lrow) {
                            *gv += d - l.exp() * s;
                        }
                    }
                });
            }
            Op::LogSumExp { a } => {
                let x = self.value(*a);
                let n = x.cols();
                self.acc(grads, *a, |g| {
                    for (r, (grow, xrow)) in g.chunks_mut(n).zip(x.data().chunks(n)).enumerate() {
                        let lse = y.data()[r];
                        for (gv, xv) in grow.iter_mut().zip(xrow) {
                            *gv += gy[r] * (xv - lse).exp();
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = y.cols();
                let gv = self.value(*gamma).data();
                self.acc(grads, *x, |g| {
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, drow)) in g.chunks_mut(n).zip(gy.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = drow[c] * gv[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, hrow);
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            grow[c] += k * (n as f64 * dxhat[c] - s1 - hrow[c] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |g| {
                    for (drow, hrow) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            g[c] += drow[c] * hrow[c];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for drow in gy.chunks(n) {
                        add_into(g, drow);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = y.cols();
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |g| {
                        for (grow, drow) in g.chunks_mut(w).zip(gy.chunks(total)) {
                            add_into(grow, &drow[c0..c0 + w]);
                        }
                    });
                    c0 += w;
                }
            }
            Op::SliceRows { a, start } => {
                let n = y.cols();
                self.acc(grads, *a, |g| add_into(&mut g[start * n..start * n + gy.len()], gy));
            }
            Op::GatherRows { a, idx } => {
                let n = y.cols();
                self.acc(grads, *a, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { a, idx } => {
                let n = y.cols();
                self.acc(grads, *a, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[r * n..(r + 1) * n], &gy[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Pick { a, idx } => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |g| {
                    for (&(r, c), d) in idx.iter().zip(gy) {
                        g[r * n + c] += d;
                    }
                });
            }
            Op::RowSum { a } => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |g| {
                    for (grow, d) in g.chunks_mut(n).zip(gy) {
                        for gv in grow.iter_mut() {
                            *gv += d;
                        }
                    }
                });
            }
            Op::Recip { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((gv, d), xv) in g.iter_mut().zip(gy).zip(x) {
                        *gv -= d / (xv * xv);
                    }
                });
            }
            Op::Sum { a } => self.acc(grads, *a, |g| {
                for gv in g.iter_mut() {
                    *gv += gy[0];
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let d = y.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut off = 0;
                let mut pi = 0;
                for &n in segments {
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let c0 = h * dh;
                        let row = |t: usize| (off + t) * d + c0..(off + t) * d + c0 + dh;
                        let mut ds = vec![0.0; n];
                        for i in 0..n {
                            let go = &gy[row(i)];
                            let mut acc = 0.0;
                            for j in 0..=i {
                                let pij = p[i * n + j];
                                let dp = dot(go, &vd[row(j)]);
                                ds[j] = dp;
                                acc += pij * dp;
                                for (dvv, gov) in dv[row(j)].iter_mut().zip(go) {
                                    *dvv += pij * gov;
                                }
                            }
                            for j in 0..=i {
                                let s = scale * p[i * n + j] * (ds[j] - acc);
                                if s == 0.0 {
                                    continue;
                                }
                                let (ri, rj) = (row(i), row(j));
                                for c in 0..dh {
                                    dq[ri.start + c] += s * kd[rj.start + c];
                                    dk[rj.start + c] += s * qd[ri.start + c];
                                }
                            }
                        }
                    }
                    off += n;
                }
                self.acc(grads, *q, |g| add_into(g, &dq));
                self.acc(grads, *k, |g| add_into(g, &dk));
                self.acc(grads, *v, |g| add_into(g, &dv));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(g);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
