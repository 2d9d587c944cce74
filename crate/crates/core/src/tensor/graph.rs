use std::sync::Arc;

use super::kernels::{self, gemm};
pub use super::kernels::AttentionShape;
use super::special::{asinh_prime, erf, erf_prime};
use super::{Result, RopeTable, Stat, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Erf,
    Tanh,
    Asinh,
    Silu,
}

impl Unary {
    fn apply(self, u: f64) -> f64 {
        match self {
            Unary::Erf => erf(u),
            Unary::Tanh => u.tanh(),
            Unary::Asinh => u.asinh(),
            Unary::Silu => u / (1.0 + (-u).exp()),
        }
    }

    fn derivative(self, u: f64, out: f64) -> f64 {
        match self {
            Unary::Erf => erf_prime(u),
            Unary::Tanh => 1.0 - out * out,
            Unary::Asinh => asinh_prime(u),
            Unary::Silu => {
                let sig = 1.0 / (1.0 + (-u).exp());
                sig * (1.0 + u * (1.0 - sig))
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Affine(Var, Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Unary(Unary, Var),
    AsinhCompress(Var, Var),
    MatMul(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNormRows {
        x: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable>,
        positions: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reduce(Var, Stat),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape. Nodes are appended in execution order, so the node list
/// is always topologically sorted.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose leaves never require gradients (evaluation mode).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf, copying its values.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(shape, value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.leaf(shape, value, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> Option<f64> {
        let value = self.value(v);
        (value.len() == 1).then(|| value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a node's value.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn scalar_of(&self, op: &'static str, v: Var) -> Result<f64> {
        self.item(v).ok_or_else(|| TensorError::BadRank {
            op,
            expected: "a single-element scalar",
            shape: self.shape(v).to_vec(),
        })
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(TensorError::BadRank {
                op,
                expected: "a rank-2 tensor",
                shape: other.to_vec(),
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), rg)
    }

    /// Multiplication by a learnable scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("scale_by", s)?;
        let value = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::ScaleBy(x, s), rg))
    }

    /// `a * x + b` with learnable scalars `a` and `b`.
    pub fn affine(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let av = self.scalar_of("affine", a)?;
        let bv = self.scalar_of("affine", b)?;
        let value = self.value(x).iter().map(|v| av * v + bv).collect();
        let rg = self.rg(&[x, a, b]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Affine(x, a, b), rg))
    }

    fn row_operand(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (_, w) = self.dims2(op, x)?;
        if self.value(v).len() != w {
            return Err(mismatch(op, self.shape(x), self.shape(v)));
        }
        Ok(w)
    }

    /// Adds a `[width]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let w = self.row_operand("add_row", x, v)?;
        let vv = self.value(v);
        let value = self.value(x).iter().enumerate().map(|(i, a)| a + vv[i % w]).collect();
        let rg = self.rg(&[x, v]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, v), rg))
    }

    /// Multiplies every row of `x` elementwise by a `[width]` vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let w = self.row_operand("mul_row", x, v)?;
        let vv = self.value(v);
        let value = self.value(x).iter().enumerate().map(|(i, a)| a * vv[i % w]).collect();
        let rg = self.rg(&[x, v]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulRow(x, v), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).iter().map(|&u| kind.apply(u)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Unary(kind, x), rg)
    }

    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(Unary::Erf, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn asinh(&mut self, x: Var) -> Var {
        self.unary(Unary::Asinh, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    /// `asinh(beta * x) / beta` with `beta = exp(log_beta)`.
    pub fn asinh_compress(&mut self, x: Var, log_beta: Var) -> Result<Var> {
        let beta = self.scalar_of("asinh_compress", log_beta)?.exp();
        let value = self.value(x).iter().map(|v| (beta * v).asinh() / beta).collect();
        let rg = self.rg(&[x, log_beta]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AsinhCompress(x, log_beta), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    /// Gathers rows of a `[vocab, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, w) = self.dims2("embedding", table)?;
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            value.extend_from_slice(&tv[id * w..(id + 1) * w]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), w],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, w) = self.dims2("rms_norm_rows", x)?;
        if w == 0 {
            return Err(TensorError::Empty { op: "rms_norm_rows" });
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / w);
        for row in xv.chunks_exact(w) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            value.extend(row.iter().map(|v| v * r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::RmsNormRows { x, inv_rms }, rg))
    }

    /// Rotary embedding of every head in every row; row `r` sits at `positions[r]`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable>, positions: &[usize]) -> Result<Var> {
        let (rows, w) = self.dims2("rope", x)?;
        if rows != positions.len() {
            return Err(mismatch("rope", self.shape(x), &[positions.len()]));
        }
        let mut value = self.value(x).to_vec();
        table.rotate(&mut value, w, positions, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![rows, w],
            value,
            Op::Rope {
                x,
                table: Arc::clone(table),
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Fused causal grouped-query attention.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        if shape.kv_heads == 0 || shape.heads % shape.kv_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: {} heads not divisible by {} kv heads",
                shape.heads, shape.kv_heads
            )));
        }
        let rows = shape.batch * shape.seq;
        if self.shape(q) != [rows, shape.q_width()] {
            return Err(mismatch("attention", self.shape(q), &[rows, shape.q_width()]));
        }
        for kv in [k, v] {
            if self.shape(kv) != [rows, shape.kv_width()] {
                return Err(mismatch("attention", self.shape(kv), &[rows, shape.kv_width()]));
            }
        }
        let (value, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), shape);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![rows, shape.q_width()],
            value,
            Op::Attention { q, k, v, shape, probs },
            rg,
        ))
    }

    /// Mean per-row negative log-likelihood in nats.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2("softmax_cross_entropy", logits)?;
        if rows != targets.len() {
            return Err(mismatch("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if rows == 0 {
            return Err(TensorError::Empty {
                op: "softmax_cross_entropy",
            });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for (row, &t) in lv.chunks_exact(vocab).zip(targets) {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    extent: vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[t];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / rows as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Differentiable population statistic over all elements.
    pub fn reduce(&mut self, x: Var, stat: Stat) -> Result<Var> {
        let s = super::reduce_stats(self.value(x), stat)?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Reduce(x, stat), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::BadRank {
                op: "backward",
                expected: "a scalar loss",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], c: f64) {
        if let Some(s) = self.slot(grads, v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
        }
    }

    fn acc_scalar(&self, grads: &mut [Option<Vec<f64>>], v: Var, amount: f64) {
        if let Some(s) = self.slot(grads, v) {
            s[0] += amount;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc_scaled(grads, a, g, 1.0);
                self.acc_scaled(grads, b, g, 1.0);
            }
            &Op::Mul(a, b) => {
                for (dst, other) in [(a, b), (b, a)] {
                    let ov = self.value(other);
                    if let Some(s) = self.slot(grads, dst) {
                        for ((s, gi), o) in s.iter_mut().zip(g).zip(ov) {
                            *s += gi * o;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => self.acc_scaled(grads, x, g, c),
            &Op::ScaleBy(x, s) => {
                let sv = self.value(s)[0];
                self.acc_scaled(grads, x, g, sv);
                let ds: f64 = g.iter().zip(self.value(x)).map(|(a, b)| a * b).sum();
                self.acc_scalar(grads, s, ds);
            }
            &Op::Affine(x, a, b) => {
                let av = self.value(a)[0];
                self.acc_scaled(grads, x, g, av);
                let da: f64 = g.iter().zip(self.value(x)).map(|(p, q)| p * q).sum();
                self.acc_scalar(grads, a, da);
                self.acc_scalar(grads, b, g.iter().sum());
            }
            &Op::AddRow(x, v) => {
                self.acc_scaled(grads, x, g, 1.0);
                if let Some(s) = self.slot(grads, v) {
                    let w = s.len();
                    for row in g.chunks_exact(w) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::MulRow(x, v) => {
                let vv = self.value(v);
                let w = vv.len();
                if let Some(s) = self.slot(grads, x) {
                    for (idx, (a, b)) in s.iter_mut().zip(g).enumerate() {
                        *a += b * vv[idx % w];
                    }
                }
                let xv = self.value(x);
                if let Some(s) = self.slot(grads, v) {
                    for (grow, xrow) in g.chunks_exact(w).zip(xv.chunks_exact(w)) {
                        for j in 0..w {
                            s[j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            &Op::Unary(kind, x) => {
                let xv = self.value(x);
                let out = &node.value;
                if let Some(s) = self.slot(grads, x) {
                    for (idx, a) in s.iter_mut().enumerate() {
                        *a += g[idx] * kind.derivative(xv[idx], out[idx]);
                    }
                }
            }
            &Op::AsinhCompress(x, lb) => {
                let beta = self.value(lb)[0].exp();
                let xv = self.value(x);
                let out = &node.value;
                let dydx: Vec<f64> = xv.iter().map(|v| asinh_prime(beta * v)).collect();
                if let Some(s) = self.slot(grads, x) {
                    for (idx, a) in s.iter_mut().enumerate() {
                        *a += g[idx] * dydx[idx];
                    }
                }
                let dlb: f64 = (0..xv.len()).map(|i| g[i] * (xv[i] * dydx[i] - out[i])).sum();
                self.acc_scalar(grads, lb, dlb);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let bv = self.value(b);
                if let Some(s) = self.slot(grads, a) {
                    gemm(m, n, k, 1.0, g, (n, 1), bv, (1, n), 1.0, s, (k, 1));
                }
                let av = self.value(a);
                if let Some(s) = self.slot(grads, b) {
                    gemm(k, m, n, 1.0, av, (1, k), g, (n, 1), 1.0, s, (n, 1));
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(s) = self.slot(grads, *table) {
                    let w = node.shape[1];
                    for (row, &id) in g.chunks_exact(w).zip(ids) {
                        s[id * w..(id + 1) * w].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::RmsNormRows { x, inv_rms } => {
                let w = node.shape[1];
                let y = &node.value;
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let span = r * w..(r + 1) * w;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for ((dst, gi), yi) in s[span].iter_mut().zip(gr).zip(yr) {
                            *dst += inv * (gi - yi * mean_gy);
                        }
                    }
                }
            }
            Op::Rope { x, table, positions } => {
                if self.nodes[x.0].requires_grad {
                    let mut back = g.to_vec();
                    table
                        .rotate(&mut back, node.shape[1], positions, true)
                        .expect("shape validated in forward");
                    self.acc_scaled(grads, *x, &back, 1.0);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let want = |var: Var| self.nodes[var.0].requires_grad;
                let mut dq = want(*q).then(|| vec![0.0; self.value(*q).len()]);
                let mut dk = want(*k).then(|| vec![0.0; self.value(*k).len()]);
                let mut dv = want(*v).then(|| vec![0.0; self.value(*v).len()]);
                kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *shape,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        self.acc_scaled(grads, var, &d, 1.0);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let c = g[0] / targets.len() as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut s[r * vocab..(r + 1) * vocab];
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += c * pr[j];
                        }
                        row[t] -= c;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(s) = self.slot(grads, x) {
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Reduce(x, stat) => {
                let xv = self.value(x);
                let n = xv.len() as f64;
                let out = node.value[0];
                let mean = xv.iter().sum::<f64>() / n;
                if let Some(s) = self.slot(grads, x) {
                    for (a, &xi) in s.iter_mut().zip(xv) {
                        *a += g[0]
                            * match stat {
                                Stat::Mean => 1.0 / n,
                                Stat::MeanSquare => 2.0 * xi / n,
                                Stat::StdPopulation if out > 0.0 => (xi - mean) / (n * out),
                                Stat::StdPopulation => 0.0,
                            };
                    }
                }
            }
        }
    }
}
