//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] replays the nodes in reverse order from a scalar
//! root and returns a [`Gradients`] table. Leaves created with
//! [`Tape::constant`] never receive gradients, and no work is spent
//! propagating into subgraphs that only depend on constants; this is how the
//! frozen backbone weights and detached prototypes stay out of the update.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Blocked multi-head scaled dot-product attention layout.
///
/// Queries are split into `q.rows() / q_block` independent blocks; block `b`
/// attends over key/value rows `b * k_block .. (b + 1) * k_block`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub scale: f64,
    pub causal: bool,
    pub q_block: usize,
    pub k_block: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    RowMin(Var, Vec<usize>),
    MaxAll(Var, usize),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Smooth GELU (tanh form).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(ta.cols(), tr.cols(), "add_row: width mismatch");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_slice_mut(r).iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `scale * a + shift` elementwise, with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Powf(a, p), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_slice_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer_norm: gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm: beta shape");
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_slice_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gg + bb;
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Each row divided by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let mut value = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let n = tx.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(eps);
            for o in value.row_slice_mut(r) {
                *o /= d;
            }
            norms.push(n);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::NormalizeRows { x, norms, eps }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).reshape(rows, cols).expect("reshape: element count must match");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Vertical concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors).expect("concat: column counts must match");
        let rg = self.any_grad(parts);
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(ta.row_slice(i));
        }
        let value = Tensor::from_vec(index.len(), cols, data).expect("gather sizes");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gather(a, index), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, (start..start + len).collect())
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row minimum over columns (`n × 1`); ties resolve to the first column.
    pub fn row_min(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut mins = Vec::with_capacity(ta.rows());
        let mut arg = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let (j, m) = ta
                .row_slice(r)
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
            mins.push(m);
            arg.push(j);
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::column(&mins), Op::RowMin(a, arg), rg)
    }

    /// Maximum over all entries (`1 × 1`); ties resolve to the first index.
    pub fn max_all(&mut self, a: Var) -> Var {
        let (j, m) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::MaxAll(a, j), rg)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (value, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &spec);
        let rg = self.any_grad(&[q, k, v]);
        self.push(value, Op::Attention { q, k, v, spec, probs }, rg)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Gradients of the `1 × 1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if rg(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if rg(*a) {
                    acc(*a, g.zip_map(tb, |x, y| x / y));
                }
                if rg(*b) {
                    let out = &node.value;
                    let t = g.zip_map(out, |x, o| x * o).zip_map(tb, |x, y| -x / y);
                    acc(*b, t);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if rg(*row) {
                    let mut s = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                    acc(*row, s);
                }
            }
            Op::Affine(a, s) => acc(*a, g.scale(*s)),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, o| x * o)),
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, o| x * o * (1.0 - o))),
            Op::Powf(a, p) => {
                let p = *p;
                acc(*a, g.zip_map(self.value(*a), |x, y| x * p * y.powf(p - 1.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, g.zip_map(self.value(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 }));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let tg = self.value(*gamma);
                if rg(*gamma) || rg(*beta) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if rg(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let xh = xhat.row_slice(r);
                        let dxh: Vec<f64> = g.row_slice(r).iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / n;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in dx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    if norms[r] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in dx.row_slice_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    } else {
                        for (o, gv) in dx.row_slice_mut(r).iter_mut().zip(gr) {
                            *o = gv / eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c).expect("reshape grad"));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if rg(p) {
                        acc(p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::Gather(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (o, &src) in index.iter().enumerate() {
                    for (dst, x) in d.row_slice_mut(src).iter_mut().zip(g.row_slice(o)) {
                        *dst += x;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::RowMin(a, arg) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for (row, &j) in arg.iter().enumerate() {
                    d.set(row, j, g.get(row, 0));
                }
                acc(*a, d);
            }
            Op::MaxAll(a, j) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[*j] = g.item();
                acc(*a, d);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    spec,
                    probs,
                    g,
                    (rg(*q), rg(*k), rg(*v)),
                );
                if let Some(d) = dq {
                    acc(*q, d);
                }
                if let Some(d) = dk {
                    acc(*k, d);
                }
                if let Some(d) = dv {
                    acc(*v, d);
                }
            }
        }
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> usize {
    assert!(spec.heads >= 1 && q.cols() % spec.heads == 0, "attention: heads must divide width");
    assert_eq!(q.cols(), k.cols(), "attention: q/k width");
    assert_eq!(k.shape(), v.shape(), "attention: k/v shape");
    assert!(spec.q_block > 0 && spec.k_block > 0, "attention: empty block");
    assert_eq!(q.rows() % spec.q_block, 0, "attention: query rows not a multiple of q_block");
    let blocks = q.rows() / spec.q_block;
    assert_eq!(k.rows(), blocks * spec.k_block, "attention: key rows do not match block count");
    if spec.causal {
        assert_eq!(spec.q_block, spec.k_block, "attention: causal needs square blocks");
    }
    blocks
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec) -> (Tensor, Vec<f64>) {
    let blocks = check_attention_shapes(q, k, v, spec);
    let (qb, kb, h) = (spec.q_block, spec.k_block, spec.heads);
    let c = q.cols();
    let dh = c / h;
    let mut out = Tensor::zeros(q.rows(), c);
    let mut probs = vec![0.0; blocks * h * qb * kb];
    let mut logits = vec![0.0; kb];
    for b in 0..blocks {
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..qb {
                let qi = &q.row_slice(b * qb + i)[cols.clone()];
                let limit = if spec.causal { i + 1 } else { kb };
                let mut max = f64::NEG_INFINITY;
                for (j, l) in logits.iter_mut().enumerate().take(limit) {
                    let kj = &k.row_slice(b * kb + j)[cols.clone()];
                    *l = spec.scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    max = max.max(*l);
                }
                let p = &mut probs[((b * h + head) * qb + i) * kb..][..kb];
                let mut z = 0.0;
                for j in 0..limit {
                    p[j] = (logits[j] - max).exp();
                    z += p[j];
                }
                for pj in p.iter_mut().take(limit) {
                    *pj /= z;
                }
                let orow = &mut out.row_slice_mut(b * qb + i)[cols.clone()];
                for (j, &pj) in p.iter().enumerate().take(limit) {
                    let vj = &v.row_slice(b * kb + j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

type AttnGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
    probs: &[f64],
    g: &Tensor,
    need: (bool, bool, bool),
) -> AttnGrads {
    let blocks = q.rows() / spec.q_block;
    let (qb, kb, h) = (spec.q_block, spec.k_block, spec.heads);
    let c = q.cols();
    let dh = c / h;
    let mut dq = Tensor::zeros(q.rows(), c);
    let mut dk = Tensor::zeros(k.rows(), c);
    let mut dv = Tensor::zeros(v.rows(), c);
    let mut dp = vec![0.0; kb];
    for b in 0..blocks {
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..qb {
                let p = &probs[((b * h + head) * qb + i) * kb..][..kb];
                let limit = if spec.causal { i + 1 } else { kb };
                let gi = &g.row_slice(b * qb + i)[cols.clone()];
                let mut dot = 0.0;
                for j in 0..limit {
                    let vj = &v.row_slice(b * kb + j)[cols.clone()];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += p[j] * dp[j];
                    if need.2 {
                        let dvj = &mut dv.row_slice_mut(b * kb + j)[cols.clone()];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * x;
                        }
                    }
                }
                for j in 0..limit {
                    let ds = p[j] * (dp[j] - dot) * spec.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if need.0 {
                        let kj = k.row_slice(b * kb + j)[cols.clone()].to_vec();
                        let dqi = &mut dq.row_slice_mut(b * qb + i)[cols.clone()];
                        for (o, x) in dqi.iter_mut().zip(&kj) {
                            *o += ds * x;
                        }
                    }
                    if need.1 {
                        let qi = q.row_slice(b * qb + i)[cols.clone()].to_vec();
                        let dkj = &mut dk.row_slice_mut(b * kb + j)[cols.clone()];
                        for (o, x) in dkj.iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
    }
    (need.0.then_some(dq), need.1.then_some(dk), need.2.then_some(dv))
}
