use std::collections::HashMap;

use crate::tensor::gemm;
use crate::{NumericsError, Result, Tensor};

const LN_EPS_DEFAULT: f64 = 1e-5;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    Pick(Var, usize),
}

struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Gradients of a scalar loss, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// Gradient for `id`, or `None` when the parameter did not reach the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, materialising zeros for unreachable parameters.
    pub fn get_or_zeros(&self, id: ParamId, params: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                        *a += scale * b;
                    }
                }
                None => *dst = Some(src.map(|x| scale * x)),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward simply walks it from the end.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    if (ar, ac) == (br, bc) {
        Ok(Bcast::Same)
    } else if br == 1 && bc == 1 {
        Ok(Bcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn rhs_index(kind: Bcast, idx: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => idx,
        Bcast::Row => idx % cols,
        Bcast::Scalar => 0,
    }
}

/// Reduce a gradient of the broadcast result back to the right-hand shape.
fn reduce_to_rhs(kind: Bcast, grad: &[f64], cols: usize, rhs_shape: &[usize]) -> Tensor {
    match kind {
        Bcast::Same => Tensor::new(rhs_shape.to_vec(), grad.to_vec()).unwrap(),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for (i, g) in grad.iter().enumerate() {
                out[i % cols] += g;
            }
            Tensor::new(rhs_shape.to_vec(), out).unwrap()
        }
        Bcast::Scalar => {
            let s: f64 = grad.iter().sum();
            Tensor::new(rhs_shape.to_vec(), vec![s]).unwrap()
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row_max(row);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.as_matrix();
        self.push(t, Op::Const)
    }

    /// Node for a trainable parameter. Repeated calls share one node so
    /// fan-out gradients accumulate in a single place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (n, k2) = tb.dims2();
        if k != k2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, ta, tb)?;
        let (r, c) = ta.dims2();
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[rhs_index(kind, i, c)]))
            .collect();
        Ok(self.push(Tensor::new(vec![r, c], out)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).as_matrix().map(f);
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    fn check_nonempty_rows(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(NumericsError::EmptyAxis { op });
        }
        Ok((r, c))
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_nonempty_rows("softmax", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row_max(row);
            let start = out.len();
            let mut s = 0.0;
            for &x in row {
                let e = (x - m).exp();
                s += e;
                out.push(e);
            }
            for y in &mut out[start..] {
                *y /= s;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_nonempty_rows("log_softmax", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let lse = logsumexp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LogSoftmax(a)))
    }

    /// Row-wise log-sum-exp, `[r, c] → [r, 1]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.check_nonempty_rows("logsumexp", a)?;
        let t = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| logsumexp(t.row_slice(i))).collect();
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::LogSumExp(a)))
    }

    /// Row-wise normalisation to zero mean and unit variance, without the
    /// affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.layer_norm_eps(a, LN_EPS_DEFAULT)
    }

    pub fn layer_norm_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.check_nonempty_rows("layer_norm", a)?;
        let t = self.value(a);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LayerNorm(a, eps)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let rows = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{end} out of bounds for {c} columns"),
            });
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        Ok(self.push(Tensor::new(vec![r, end - start], out)?, Op::SliceCols(a, start, end)))
    }

    /// Gather rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NumericsError::InvalidArgument {
                op: "select_rows",
                msg: format!("row {bad} out of bounds for {r} rows"),
            });
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        Ok(self.push(Tensor::new(vec![idx.len(), c], out)?, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// Sum of every element, as `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Column sums, `[r, c] → [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let t = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a))
    }

    /// Element at flat index `i`, as `[1, 1]`.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.numel() {
            return Err(NumericsError::InvalidArgument {
                op: "pick",
                msg: format!("index {i} out of bounds for {} elements", t.numel()),
            });
        }
        let x = t.data()[i];
        Ok(self.push(Tensor::scalar(x), Op::Pick(a, i)))
    }

    /// `x · W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&lt.dims2_vec(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let pshape = self.params.get(*id).shape().to_vec();
                    out.grads[id.0] = Some(Tensor::new(pshape, g.into_data())?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2();
                    let n = tb.cols();
                    let mut da = vec![0.0; m * k];
                    // dA = G · Bᵀ
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, 0.0);
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ · G
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2();
                    let n = tb.rows();
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (k, 1), &mut da, 0.0);
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), ta.data(), (k, 1), &mut db, 0.0);
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let kind = broadcast_kind("add", ta, tb)?;
                    let gb = reduce_to_rhs(kind, g.data(), ta.cols(), &tb.dims2_vec());
                    self.acc(&mut grads, *a, g.data().to_vec());
                    self.acc(&mut grads, *b, gb.into_data().into_iter().map(|x| sign * x).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let kind = broadcast_kind("mul", ta, tb)?;
                    let c = ta.cols();
                    let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
                    let da: Vec<f64> =
                        (0..gd.len()).map(|j| gd[j] * bd[rhs_index(kind, j, c)]).collect();
                    let prod: Vec<f64> = (0..gd.len()).map(|j| gd[j] * ad[j]).collect();
                    let db = reduce_to_rhs(kind, &prod, c, &tb.dims2_vec());
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db.into_data());
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let kind = broadcast_kind("div", ta, tb)?;
                    let c = ta.cols();
                    let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
                    let da: Vec<f64> =
                        (0..gd.len()).map(|j| gd[j] / bd[rhs_index(kind, j, c)]).collect();
                    let prod: Vec<f64> = (0..gd.len())
                        .map(|j| {
                            let y = bd[rhs_index(kind, j, c)];
                            -gd[j] * ad[j] / (y * y)
                        })
                        .collect();
                    let db = reduce_to_rhs(kind, &prod, c, &tb.dims2_vec());
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db.into_data());
                }
                Op::Scale(a, s) => {
                    let d = g.data().iter().map(|x| x * s).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, g.into_data()),
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let d = g.data().iter().zip(y).map(|(g, y)| g * y).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let d = g.data().iter().zip(x).map(|(g, x)| g / x).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let d = g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a).data();
                    let d = g.data().iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    let d = g.data().iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                    self.acc(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (r, c) = y.dims2();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (r, c) = y.dims2();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let y = node.value.as_ref().unwrap().data();
                    let (r, c) = x.dims2();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g.data()[i] * (x.get(i, j) - y[i]).exp();
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let y = node.value.as_ref().unwrap();
                    let (r, c) = x.dims2();
                    let n = c as f64;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let xr = x.row_slice(i);
                        let yr = y.row_slice(i);
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..c {
                            d[i * c + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        offset += c;
                        self.acc(&mut grads, p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc(&mut grads, p, g.data()[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.shape(*a);
                    let w = end - start;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    self.acc(&mut grads, *a, g.transpose().into_data());
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).numel();
                    self.acc(&mut grads, *a, vec![g.data()[0]; n]);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend_from_slice(g.data());
                    }
                    self.acc(&mut grads, *a, d);
                }
                Op::Pick(a, idx) => {
                    let n = self.value(*a).numel();
                    let mut d = vec![0.0; n];
                    d[*idx] = g.data()[0];
                    self.acc(&mut grads, *a, d);
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: Vec<f64>) {
        // Constants never need gradients.
        if matches!(self.nodes[v.0].op, Op::Const) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&d) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).dims2_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient shape"));
            }
        }
    }
}

impl Tensor {
    fn dims2_vec(&self) -> Vec<usize> {
        let (r, c) = self.dims2();
        vec![r, c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_over_empty_axis_fails() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(x), Err(NumericsError::EmptyAxis { .. })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row(vec![3.5; 8]));
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let ps = store(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&ps);
        let x = g.param(ParamId(0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let ps = store(&[("x", Tensor::row(vec![1.0])), ("unused", Tensor::row(vec![5.0]))]);
        let mut g = Graph::new(&ps);
        let x = g.param(ParamId(0));
        let _ = g.param(ParamId(1));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ParamId(1)).is_none());
        assert_eq!(grads.get_or_zeros(ParamId(1), &ps).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let ps = store(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&ps);
        let x = g.param(ParamId(0));
        assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x + 3x → d/dx = 4
        let ps = store(&[("x", Tensor::scalar(0.7))]);
        let mut g = Graph::new(&ps);
        let x = g.param(ParamId(0));
        let x3 = g.scale(x, 3.0);
        let s = g.add(x, x3).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[4.0]);
    }
}
