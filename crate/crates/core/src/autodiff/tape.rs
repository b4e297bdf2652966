use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Stand-in for `q` inside the log of the KL divergence where `q` is zero.
pub const KL_FLOOR: f64 = 1e-12;
/// Tolerance on the unit-sum check for probability inputs.
pub const SIMPLEX_TOL: f64 = 1e-6;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Reference to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var, usize),
    Sum(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Kl { p: Var, q: Var, slices: usize },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward operations in order and replays them in reverse for
/// gradients. Nodes only reference earlier nodes, so the recording order
/// is a topological order.
pub struct Tape {
    nodes: Vec<Node>,
    num_params: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_slices(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    // (outer, len, stride): slice k of `outer` starts at base(k) and steps by stride
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1),
        (2, 0) => (shape[1], shape[0], shape[1]),
        (2, 1) => (shape[0], shape[1], 1),
        _ => unreachable!("validated by caller"),
    }
}

fn slice_base(shape: &[usize], axis: usize, k: usize) -> usize {
    match (shape.len(), axis) {
        (2, 1) => k * shape[1],
        (2, 0) => k,
        _ => 0,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            num_params: 0,
        }
    }

    /// Starts a tape whose first leaves are the store's parameters, so
    /// `ParamId(i)` binds to `Var(i)`.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        for (_, t) in store.iter() {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.nodes.push(Node {
                value: t,
                op: Op::Leaf,
            });
        }
        tape.num_params = store.len();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.num_params, "parameter not bound on this tape");
        Var(id.0)
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

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.grad(self.param(id))
    }

    /// Gradient-tracking leaf.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Copies the current value into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Tensor::from_parts(self.shape(v).to_vec(), self.value(v).data().to_vec());
        self.constant(t)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut t = Tensor::from_parts(shape, data);
        t.set_requires_grad(inputs.iter().any(|&v| self.needs(v)));
        self.push(t, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        self.push_op(self.shape(a).to_vec(), out, Op::Scale(a, s), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push_op(self.shape(a).to_vec(), out, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Adds a length-`n` bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n]
                .iter_mut()
                .zip(b)
                .for_each(|(x, y)| *x += y);
        }
        Ok(self.push_op(vec![m, n], out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push_op(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).data().to_vec();
        Ok(self.push_op(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push_op(vec![m, n], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2("concat_rows", parts[0])?.1;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_op(vec![m, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::Index {
                what: "slice_cols",
                index: end,
                len: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push_op(vec![m, end - start], out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start >= end || end > m {
            return Err(Error::Index {
                what: "slice_rows",
                index: end,
                len: m,
            });
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        Ok(self.push_op(vec![end - start, n], out, Op::SliceRows(a, start), &[a]))
    }

    /// Row lookup (embedding gather); indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", table)?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push_op(
            vec![idx.len(), n],
            out,
            Op::GatherRows(table, idx.to_vec()),
            &[table],
        ))
    }

    /// Softmax along `axis`, with masked (`false`) entries forced to exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if !matches!(shape.len(), 1 | 2) || axis >= shape.len() {
            return Err(Error::dim("masked_softmax", &shape, &[axis]));
        }
        let x = self.value(logits).data();
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::dim("masked_softmax", &shape, &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let (outer, len, stride) = softmax_slices(&shape, axis);
        let mut out = vec![0.0; x.len()];
        for k in 0..outer {
            let base = slice_base(&shape, axis, k);
            let idx = (0..len).map(|j| base + j * stride);
            let max = idx
                .clone()
                .filter(|&i| keep(i))
                .map(|i| x[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice("masked_softmax"));
            }
            let mut z = 0.0;
            for i in idx.clone().filter(|&i| keep(i)) {
                out[i] = (x[i] - max).exp();
                z += out[i];
            }
            for i in idx.filter(|&i| keep(i)) {
                out[i] /= z;
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax(logits, axis), &[logits]))
    }

    pub fn softmax(&mut self, logits: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(logits, axis, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mu) * is;
            }
        }
        let out = xhat.clone();
        Ok(self.push_op(vec![m, n], out, Op::LayerNorm { x, xhat, inv_std }, &[x]))
    }

    /// `Σ p·ln(p / max(q, 1e-12))` per distribution slice (the last axis),
    /// averaged over slices. Entries with `p == 0` contribute exactly 0.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let cols = self.value(p).cols();
        let slices = self.value(p).numel() / cols;
        check_simplex(self.value(p).data(), cols, "p")?;
        check_simplex(self.value(q).data(), cols, "q")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let total: f64 = pd
            .iter()
            .zip(qd)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi.ln() - kl_log(qi)))
            .sum();
        Ok(self.push_op(
            vec![],
            vec![total / slices as f64],
            Op::Kl { p, q, slices },
            &[p, q],
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = zip_map(self.value(a), self.value(b), |x, y| (x - y) * (x - y))
            .iter()
            .sum();
        Ok(self.push_op(vec![], vec![s / n], Op::Mse(a, b), &[a, b]))
    }

    /// Mean over rows of `-ln softmax(row)[target]`. A rank-1 input is one row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if t.rank() > 2 || targets.len() != m {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let x = t.data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= n {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: tgt,
                    len: n,
                });
            }
            let row = &x[r * n..(r + 1) * n];
            let arg = (0..n).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            let max = row[arg];
            // ln z = ln(1 + Σ_{c≠arg} e^(x_c - max)), kept precise via ln_1p
            let rest: f64 = (0..n).filter(|&c| c != arg).map(|c| (row[c] - max).exp()).sum();
            let ln_z = rest.ln_1p();
            let lse = max + ln_z;
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
            loss += (max - row[tgt]) + ln_z;
        }
        Ok(self.push_op(
            vec![],
            vec![loss / m as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.cross_entropy_rows(logits, &[target])
    }

    /// Reverse pass from a single-element `loss`. Gradients accumulate into
    /// every gradient-tracking node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        if self.needs(v) {
            self.nodes[v.0].value.accumulate_grad(g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op out so we can borrow the tape mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.acc(*a, &da);
                }
                if self.needs(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.acc(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.acc(*a, &da);
            }
            Op::Act(a, kind) => {
                let out = self.nodes[i].value.data();
                let da: Vec<f64> = match kind {
                    // subgradient 0 at exactly 0
                    Activation::Relu => g
                        .iter()
                        .zip(out)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect(),
                    Activation::Tanh => g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect(),
                };
                self.acc(*a, &da);
            }
            Op::AddBias(a, bias) => {
                self.acc(*a, g);
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    self.acc(*bias, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let da = transpose_raw(g, n, m);
                self.acc(*a, &da);
            }
            Op::Reshape(a) => self.acc(*a, g),
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].value.rows();
                let n = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        self.acc(p, &dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                    let w = self.nodes[i].value.cols();
                    let node = &mut self.nodes[a.0].value;
                    let acc = node.grad_mut_or_zero();
                    for r in 0..m {
                        for c in 0..w {
                            acc[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let n = self.value(*a).cols();
                    let acc = self.nodes[a.0].value.grad_mut_or_zero();
                    acc[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::GatherRows(table, idx) => {
                if self.needs(*table) {
                    let n = self.value(*table).cols();
                    let acc = self.nodes[table.0].value.grad_mut_or_zero();
                    for (r, &row) in idx.iter().enumerate() {
                        for c in 0..n {
                            acc[row * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, len, stride) = softmax_slices(&shape, *axis);
                let mut da = vec![0.0; y.len()];
                for k in 0..outer {
                    let base = slice_base(&shape, *axis, k);
                    let dot: f64 = (0..len).map(|j| base + j * stride).map(|ix| y[ix] * g[ix]).sum();
                    for j in 0..len {
                        let ix = base + j * stride;
                        da[ix] = y[ix] * (g[ix] - dot);
                    }
                }
                self.acc(*a, &da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(*a, &vec![g[0]; n]);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = self.value(*x).cols();
                let mut dx = vec![0.0; xhat.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = is * (gr[c] - mg - xr[c] * mgx);
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Kl { p, q, slices } => {
                let s = g[0] / *slices as f64;
                let pd = self.value(*p).data();
                let qd = self.value(*q).data();
                let dp: Vec<f64> = pd
                    .iter()
                    .zip(qd)
                    .map(|(&pi, &qi)| {
                        if pi > 0.0 {
                            s * (pi.ln() - kl_log(qi) + 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let dq: Vec<f64> = pd
                    .iter()
                    .zip(qd)
                    .map(|(&pi, &qi)| if qi > 0.0 { -s * pi / qi } else { 0.0 })
                    .collect();
                self.acc(*p, &dp);
                self.acc(*q, &dq);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let da: Vec<f64> = zip_map(self.value(*a), self.value(*b), |x, y| 2.0 * (x - y) / n * g[0]);
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let n = probs.len() / m;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / m as f64).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= g[0] / m as f64;
                }
                self.acc(*logits, &d);
            }
        }
        self.nodes[i].op = op;
    }
}

fn kl_log(q: f64) -> f64 {
    if q > 0.0 {
        q.ln()
    } else {
        KL_FLOOR.ln()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn check_simplex(d: &[f64], cols: usize, which: &str) -> Result<()> {
    for (k, slice) in d.chunks(cols).enumerate() {
        if let Some(v) = slice.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "{which}: slice {k} has entry {v}"
            )));
        }
        let s: f64 = slice.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!(
                "{which}: slice {k} sums to {s}"
            )));
        }
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
