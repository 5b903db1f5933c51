//! Dense tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records primitive operations eagerly: every call computes its
//! value immediately and appends a node. [`Tape::gradient`] then replays the
//! record backwards. Tapes are cheap and meant to be rebuilt per evaluation.
//!
//! Shape errors are caught when an operation is recorded, and the first
//! non-finite value names the primitive that produced it. Both surface as
//! errors from [`Tape::gradient`] / [`Tape::scalar`] rather than panics.

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns, treating a vector as a single row.
    fn as_rows(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Some((1, *n)),
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Nonlinearity {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Softplus => softplus(x),
        }
    }

    /// Derivative from input `x` and output `y`. Relu-type kinks use 0 at 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Sigmoid => y * (1.0 - y),
            Nonlinearity::Softplus => sigmoid(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::LeakyRelu(_) => "leaky_relu",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Sigmoid => "sigmoid",
            Nonlinearity::Softplus => "softplus",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Slice(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Act(Var, Nonlinearity),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddRow(..) => "add_row",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Act(_, nl) => nl.name(),
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    error: Option<Error>,
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

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node, or the first recorded construction/numeric error.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.check()?;
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar output, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    fn check(&self) -> Result<()> {
        match &self.error {
            None => Ok(()),
            Some(Error::Contract(m)) => Err(Error::Contract(m.clone())),
            Some(Error::Numeric { primitive, detail }) => Err(Error::Numeric {
                primitive: primitive.clone(),
                detail: detail.clone(),
            }),
            Some(e) => Err(Error::Evaluation(e.to_string())),
        }
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        if self.error.is_none() && !value.is_finite() {
            let detail = match &op {
                Op::Leaf => "non-finite input".to_string(),
                _ => format!("node {} produced a non-finite value", self.nodes.len()),
            };
            self.error = Some(Error::numeric(op.name(), detail));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(op, value, needs)
    }

    /// Records a construction error and returns a placeholder node.
    fn fail(&mut self, op: &'static str, msg: String) -> Var {
        if self.error.is_none() {
            self.error = Some(Error::Contract(format!("{op}: {msg}")));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Tensor::scalar(0.0),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            let msg = format!("shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
            self.fail(name, msg);
            return None;
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Some(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        match self.binary(a, b, "add", |x, y| x + y) {
            Some(t) => self.push(Op::Add(a, b), t, &[a, b]),
            None => Var(self.nodes.len() - 1),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        match self.binary(a, b, "sub", |x, y| x - y) {
            Some(t) => self.push(Op::Sub(a, b), t, &[a, b]),
            None => Var(self.nodes.len() - 1),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        match self.binary(a, b, "mul", |x, y| x * y) {
            Some(t) => self.push(Op::Mul(a, b), t, &[a, b]),
            None => Var(self.nodes.len() - 1),
        }
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        match self.binary(a, b, "div", |x, y| x / y) {
            Some(t) => self.push(Op::Div(a, b), t, &[a, b]),
            None => Var(self.nodes.len() - 1),
        }
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| -x);
        self.push(Op::Neg(a), t, &[a])
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        self.push(Op::Scale(a, c), t, &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x + c);
        self.push(Op::Offset(a), t, &[a])
    }

    /// Tensor `a` times scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        if self.value(s).len() != 1 {
            let msg = format!("scale must be scalar, got {:?}", self.value(s).shape);
            return self.fail("scale_by", msg);
        }
        let c = self.value(s).data[0];
        let t = self.unary(a, |x| x * c);
        self.push(Op::ScaleBy(a, s), t, &[a, s])
    }

    /// `[m,k]·[k,n] → [m,n]` or `[m,k]·[k] → [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = match ta.shape.as_slice() {
            [m, k] => (*m, *k),
            s => return self.fail("matmul", format!("left operand must be a matrix, got {s:?}")),
        };
        let (k2, n, vec_out) = match tb.shape.as_slice() {
            [k2] => (*k2, 1, true),
            [k2, n] => (*k2, *n, false),
            s => return self.fail("matmul", format!("right operand must be rank 1 or 2, got {s:?}")),
        };
        if k != k2 {
            return self.fail("matmul", format!("inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * k..(i + 1) * k];
            for (p, &aip) in row.iter().enumerate() {
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let shape = if vec_out { vec![m] } else { vec![m, n] };
        self.push(Op::MatMul(a, b), Tensor { shape, data: out }, &[a, b])
    }

    /// `[m,k]·[n,k]ᵀ → [m,n]`; the batch-times-weights product of a dense layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = match (ta.shape.as_slice(), tb.shape.as_slice()) {
            ([m, k], [n, k2]) => ((*m, *k), (*n, *k2)),
            (sa, sb) => return self.fail("matmul_t", format!("operands must be matrices, got {sa:?} and {sb:?}")),
        };
        if k != k2 {
            return self.fail("matmul_t", format!("inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        self.push(Op::MatMulT(a, b), Tensor { shape: vec![m, n], data: out }, &[a, b])
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = match tm.shape.as_slice() {
            [r, c] => (*r, *c),
            s => return self.fail("add_row", format!("left operand must be a matrix, got {s:?}")),
        };
        if tv.shape != [cols] {
            return self.fail("add_row", format!("row vector shape {:?} vs {cols} columns", tv.shape));
        }
        let mut data = tm.data.clone();
        for r in 0..rows {
            for (o, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(&tv.data) {
                *o += b;
            }
        }
        self.push(Op::AddRow(m, v), Tensor { shape: vec![rows, cols], data }, &[m, v])
    }

    /// Contiguous run of `src`'s flat values starting at `offset`, given `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let t = self.value(src);
        if offset + n > t.len() {
            let msg = format!("range {offset}..{} exceeds length {}", offset + n, t.len());
            return self.fail("slice", msg);
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data[offset..offset + n].to_vec(),
        };
        self.push(Op::Slice(src, offset), value, &[src])
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let t = self.value(src);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return self.fail("reshape", format!("cannot view {:?} as {shape:?}", t.shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        self.push(Op::Reshape(src), value, &[src])
    }

    /// Flattens and concatenates into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|v| self.value(*v).data.iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), parts)
    }

    pub fn activation(&mut self, a: Var, nl: Nonlinearity) -> Var {
        let t = self.unary(a, |x| nl.apply(x));
        self.push(Op::Act(a, nl), t, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Nonlinearity::Softplus)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        self.push(Op::Log(a), t, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(Op::Exp(a), t, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        self.push(Op::Square(a), t, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    /// Row sums of a matrix: `[m,n] → [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = match t.shape.as_slice() {
            [m, n] => (*m, *n),
            s => return self.fail("sum_rows", format!("expected a matrix, got {s:?}")),
        };
        let data = (0..m).map(|i| t.data[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Op::SumRows(a), Tensor { shape: vec![m], data }, &[a])
    }

    /// Row-wise log-sum-exp: `[m,n] → [m]`, `[n] → []`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let Some((m, n)) = t.as_rows() else {
            let msg = format!("expected rank 1 or 2, got {:?}", t.shape);
            return self.fail("logsumexp_rows", msg);
        };
        let data: Vec<f64> = (0..m).map(|i| logsumexp(&t.data[i * n..(i + 1) * n])).collect();
        let shape = if t.shape.len() == 1 { vec![] } else { vec![m] };
        self.push(Op::LogSumExpRows(a), Tensor { shape, data }, &[a])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let Some((m, n)) = t.as_rows() else {
            let msg = format!("expected rank 1 or 2, got {:?}", t.shape);
            return self.fail("log_softmax_rows", msg);
        };
        let mut data = t.data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = t.shape.clone();
        self.push(Op::LogSoftmaxRows(a), Tensor { shape, data }, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let Some((m, n)) = t.as_rows() else {
            let msg = format!("expected rank 1 or 2, got {:?}", t.shape);
            return self.fail("softmax_rows", msg);
        };
        let mut data = t.data.clone();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        let shape = t.shape.clone();
        self.push(Op::SoftmaxRows(a), Tensor { shape, data }, &[a])
    }

    /// Reverse sweep from scalar `output`; one gradient per entry of `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.scalar(output)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.nodes[v.0].value.shape.clone();
                let data = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                Tensor { shape, data }
            })
            .collect())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, needs(a), || g.to_vec());
                accumulate(grads, *b, needs(b), || g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, needs(a), || g.to_vec());
                accumulate(grads, *b, needs(b), || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                accumulate(grads, *a, needs(a), || zip_map(g, &tb.data, |g, y| g * y));
                accumulate(grads, *b, needs(b), || zip_map(g, &ta.data, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                accumulate(grads, *a, needs(a), || zip_map(g, &tb.data, |g, y| g / y));
                accumulate(grads, *b, needs(b), || {
                    g.iter()
                        .zip(&ta.data)
                        .zip(&tb.data)
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect()
                });
            }
            Op::Neg(a) => accumulate(grads, *a, needs(a), || g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => accumulate(grads, *a, needs(a), || g.iter().map(|x| x * c).collect()),
            Op::Offset(a) => accumulate(grads, *a, needs(a), || g.to_vec()),
            Op::ScaleBy(a, s) => {
                let c = val(s).data[0];
                let ta = val(a);
                accumulate(grads, *a, needs(a), || g.iter().map(|x| x * c).collect());
                accumulate(grads, *s, needs(s), || {
                    vec![g.iter().zip(&ta.data).map(|(g, x)| g * x).sum()]
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = if tb.shape.len() == 1 { 1 } else { tb.shape[1] };
                // dA = G·Bᵀ
                accumulate(grads, *a, needs(a), || {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            out[i * k + p] = s;
                        }
                    }
                    out
                });
                // dB = Aᵀ·G
                accumulate(grads, *b, needs(b), || {
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            for j in 0..n {
                                out[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    out
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                accumulate(grads, *a, needs(a), || {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                out[i * k + p] += gij * tb.data[j * k + p];
                            }
                        }
                    }
                    out
                });
                accumulate(grads, *b, needs(b), || {
                    let mut out = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                out[j * k + p] += gij * ta.data[i * k + p];
                            }
                        }
                    }
                    out
                });
            }
            Op::AddRow(mv, v) => {
                let cols = val(v).len();
                accumulate(grads, *mv, needs(mv), || g.to_vec());
                accumulate(grads, *v, needs(v), || {
                    let mut out = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    out
                });
            }
            Op::Slice(src, offset) => {
                let n = val(src).len();
                accumulate(grads, *src, needs(src), || {
                    let mut out = vec![0.0; n];
                    out[*offset..*offset + g.len()].copy_from_slice(g);
                    out
                });
            }
            Op::Reshape(src) => accumulate(grads, *src, needs(src), || g.to_vec()),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(p).len();
                    accumulate(grads, *p, needs(p), || g[start..start + n].to_vec());
                    start += n;
                }
            }
            Op::Act(a, nl) => {
                let x = &val(a).data;
                let y = &node.value.data;
                accumulate(grads, *a, needs(a), || {
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| g * nl.derivative(*x, *y))
                        .collect()
                });
            }
            Op::Log(a) => accumulate(grads, *a, needs(a), || zip_map(g, &val(a).data, |g, x| g / x)),
            Op::Exp(a) => accumulate(grads, *a, needs(a), || zip_map(g, &node.value.data, |g, y| g * y)),
            Op::Square(a) => {
                accumulate(grads, *a, needs(a), || zip_map(g, &val(a).data, |g, x| 2.0 * g * x))
            }
            Op::Sum(a) => {
                let n = val(a).len();
                accumulate(grads, *a, needs(a), || vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let n = val(a).shape[1];
                accumulate(grads, *a, needs(a), || {
                    g.iter().flat_map(|gi| std::iter::repeat_n(*gi, n)).collect()
                });
            }
            Op::LogSumExpRows(a) => {
                let t = val(a);
                let (_, n) = t.as_rows().expect("validated at construction");
                accumulate(grads, *a, needs(a), || {
                    let mut out = t.data.clone();
                    for (row, gi) in out.chunks_mut(n).zip(g) {
                        softmax_in_place(row);
                        row.iter_mut().for_each(|p| *p *= gi);
                    }
                    out
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (_, n) = val(a).as_rows().expect("validated at construction");
                let y = &node.value.data;
                accumulate(grads, *a, needs(a), || {
                    let mut out = vec![0.0; y.len()];
                    for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let gs: f64 = grow.iter().sum();
                        for ((o, y), g) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o = g - y.exp() * gs;
                        }
                    }
                    out
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = val(a).as_rows().expect("validated at construction");
                let y = &node.value.data;
                accumulate(grads, *a, needs(a), || {
                    let mut out = vec![0.0; y.len()];
                    for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o = y * (g - dot);
                        }
                    }
                    out
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, needs: bool, contribution: impl FnOnce() -> Vec<f64>) {
    if !needs {
        return;
    }
    let c = contribution();
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(c),
    }
}

/// `log Σ exp(xᵢ)` with max subtraction.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
}

/// Value and gradients of a scalar expression over `leaves`.
///
/// `f` receives a fresh tape and one differentiable [`Var`] per leaf, and
/// returns the output node.
pub fn evaluate_with_gradient<F>(leaves: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    if let Some(i) = leaves.iter().position(|t| !t.is_finite()) {
        return Err(Error::contract(format!("leaf {i} is not finite")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let value = tape.scalar(out)?;
    let grads = tape.gradient(out, &vars)?;
    Ok((value, grads))
}

/// Central-difference gradient `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h`.
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let fp = f(&probe);
        probe[i] = theta[i] - h;
        let fm = f(&probe);
        probe[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(
                "finite_difference",
                format!("objective not finite when probing coordinate {i}"),
            ));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Tensor::vector(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let (v, g) = evaluate_with_gradient(&[Tensor::scalar(3.0)], |t, x| {
            let s = t.square(x[0]);
            t.sum(s)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let leaves = [Tensor::vector(vec![1.0, 2.0]), Tensor::scalar(5.0)];
        let (v, g) = evaluate_with_gradient(&leaves, |t, _| t.scalar_constant(4.0)).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_is_a_contract_violation() {
        let err = evaluate_with_gradient(&[Tensor::vector(vec![1.0, 2.0])], |t, x| t.square(x[0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn log_of_negative_names_the_primitive() {
        let err = evaluate_with_gradient(&[Tensor::scalar(-1.0)], |t, x| t.log(x[0])).unwrap_err();
        match err {
            Error::Numeric { primitive, .. } => assert_eq!(primitive, "log"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn shape_mismatch_fails_at_construction() {
        let err = evaluate_with_gradient(
            &[Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![1.0])],
            |t, x| {
                let s = t.add(x[0], x[1]);
                t.sum(s)
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let err = evaluate_with_gradient(&[Tensor::scalar(f64::NAN)], |t, x| t.sum(x[0])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference_gradient(|t| t.iter().map(|x| x * x).sum(), &[1.0, -2.0], 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] + 4.0).abs() < 1e-8);
        let z = finite_difference_gradient(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_difference_reports_bad_coordinate() {
        let err = finite_difference_gradient(|t| if t[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(finite_difference_gradient(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn softplus_round_trips() {
        for y in [1e-6, 0.05, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
