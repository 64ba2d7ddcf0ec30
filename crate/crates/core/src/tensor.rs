//! Dense row-major tensors with reverse-mode gradient accumulation.
//!
//! The op set is deliberately small: exactly what the distillation losses
//! and the toy MLP harness need (2-D matmul, elementwise ops, row-wise
//! reductions, a fused log-softmax, and the 3x3 projector convolution).
//! Forward passes record onto a [`Tape`]; [`Tape::backward`] replays the
//! recorded ops in reverse and accumulates gradients on every leaf created
//! with `requires_grad`.
//!
//! The module also hosts the shared probabilistic primitives
//! ([`temp_softmax`], [`cross_entropy`], [`kl_divergence`]) and the
//! central-difference oracle [`finite_difference_grad`] used to verify
//! every analytic gradient in the crate.

use std::fmt;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors emitted by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// Two operands cannot be combined because their shapes differ.
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    /// An operation required a different rank or axis layout.
    BadShape { op: &'static str, shape: Vec<usize> },
    /// An input that must be non-empty was empty.
    EmptyInput(&'static str),
    /// Temperature must be strictly positive.
    NonPositiveTemperature { tau: f64 },
    /// A class index was outside `[0, K)`.
    IndexOutOfRange { index: usize, len: usize },
    /// Two vectors that must share a length did not.
    LengthMismatch { left: usize, right: usize },
    /// `backward` was called on a non-scalar value.
    NotScalar { shape: Vec<usize> },
    /// A non-finite value was found where finite input is required.
    NonFinite { label: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            TensorError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected:?}, got {got:?}")
            }
            TensorError::BadShape { op, shape } => {
                write!(f, "operation {op} cannot accept shape {shape:?}")
            }
            TensorError::EmptyInput(what) => write!(f, "empty input: {what}"),
            TensorError::NonPositiveTemperature { tau } => {
                write!(f, "temperature must be > 0, got {tau}")
            }
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            TensorError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "expected a scalar, got shape {shape:?}")
            }
            TensorError::NonFinite { label } => write!(f, "non-finite value in {label}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor of 64-bit floats.
///
/// Plain data container used at module boundaries (weights, logits,
/// features). Gradient-carrying computation happens on a [`Tape`]; a
/// tensor's `grad` slot is populated when snapshotting a tape leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Row `b` of a 2-D tensor.
    pub fn row(&self, b: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[b * cols..(b + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Tanh(Var),
    Exp(Var),
    LnClamped(Var),
    RowSum(Var),
    SubCol { x: Var, col: Var },
    Sum(Var),
    Reshape(Var),
    LogSoftmaxRows { x: Var, tau: f64 },
    Conv3x3 { x: Var, w: Var, bias: Var },
    TokensToGrid { x: Var, h: usize, w: usize },
    DropFirstToken(Var),
}

#[derive(Debug, Clone)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of primitive operations; replaying it backward populates
/// gradients for every reachable `requires_grad` leaf.
///
/// A tape and its values are confined to one thread; independent tapes may
/// run in parallel.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> TensorResult<Var> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: values.len(),
            });
        }
        Ok(self.push(values, shape, requires_grad, requires_grad, Op::Leaf))
    }

    /// Trainable leaf initialized from a tensor's values.
    pub fn var_from(&mut self, t: &Tensor) -> Var {
        self.push(
            t.values.clone(),
            t.shape.clone(),
            true,
            true,
            Op::Leaf,
        )
    }

    /// Constant leaf: never receives gradient.
    pub fn constant_from(&mut self, t: &Tensor) -> Var {
        self.push(t.values.clone(), t.shape.clone(), false, false, Op::Leaf)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorResult<Var> {
        self.leaf(values, shape, false)
    }

    fn push(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
    ) -> Var {
        self.nodes.push(Node {
            values,
            shape,
            requires_grad,
            needs_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).values[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Snapshot a tape value (and its gradient, if populated) as a tensor.
    pub fn snapshot(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    fn check_same_shape(&self, a: Var, b: Var) -> TensorResult<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.node(a).shape.clone(),
                got: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, values: Vec<f64>, shape: Vec<usize>) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(values, shape, false, needs, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.check_same_shape(a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.binary(a, b, Op::Add(a, b), values, shape))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.check_same_shape(a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.binary(a, b, Op::Sub(a, b), values, shape))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.check_same_shape(a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.binary(a, b, Op::Mul(a, b), values, shape))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(values, shape, false, needs, Op::Scale(x, c))
    }

    /// `a @ b` for 2-D operands `m x k` and `k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::BadShape {
                op: "matmul",
                shape: if sa.len() != 2 { sa.to_vec() } else { sb.to_vec() },
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.binary(a, b, Op::MatMul { a, b, m, k, n }, values, vec![m, n]))
    }

    /// Broadcast add of a length-`D` bias over the rows of a `B x D` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::BadShape {
                op: "add_bias",
                shape: sb.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bvals = self.values(bias).to_vec();
        let mut values = self.values(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] += bvals[c];
            }
        }
        Ok(self.binary(x, bias, Op::AddBias { x, bias }, values, vec![rows, cols]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(values, shape, false, needs, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(values, shape, false, needs, Op::Exp(x))
    }

    /// `ln(max(x, PROB_FLOOR))` elementwise.
    pub fn ln_clamped(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .map(|v| v.max(PROB_FLOOR).ln())
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(values, shape, false, needs, Op::LnClamped(x))
    }

    /// Row sums of a `B x K` matrix as a `B x 1` column.
    pub fn row_sum(&mut self, x: Var) -> TensorResult<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(TensorError::BadShape {
                op: "row_sum",
                shape: sx.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = self.values(x);
        let values: Vec<f64> = (0..rows)
            .map(|r| xv[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(values, vec![rows, 1], false, needs, Op::RowSum(x)))
    }

    /// `x[b, k] - col[b]` for `x: B x K`, `col: B x 1`.
    pub fn sub_col(&mut self, x: Var, col: Var) -> TensorResult<Var> {
        let (sx, sc) = (self.shape(x), self.shape(col));
        if sx.len() != 2 || sc != [sx[0], 1] {
            return Err(TensorError::BadShape {
                op: "sub_col",
                shape: sc.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let cv = self.values(col).to_vec();
        let mut values = self.values(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] -= cv[r];
            }
        }
        Ok(self.binary(x, col, Op::SubCol { x, col }, values, vec![rows, cols]))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.values(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![total], vec![], false, needs, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> TensorResult<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.values(x).len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.values(x).len(),
            });
        }
        let values = self.values(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(values, shape, false, needs, Op::Reshape(x)))
    }

    /// Row-wise `log(softmax(x / tau))` with max-subtraction, fused so the
    /// backward pass uses the exact softmax probabilities.
    pub fn log_softmax_rows(&mut self, x: Var, tau: f64) -> TensorResult<Var> {
        if tau <= 0.0 {
            return Err(TensorError::NonPositiveTemperature { tau });
        }
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] == 0 {
            return Err(TensorError::BadShape {
                op: "log_softmax_rows",
                shape: sx.to_vec(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = self.values(x);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let out = log_softmax_raw(row, tau);
            values[r * cols..(r + 1) * cols].copy_from_slice(&out);
        }
        let needs = self.needs(x);
        Ok(self.push(
            values,
            vec![rows, cols],
            false,
            needs,
            Op::LogSoftmaxRows { x, tau },
        ))
    }

    /// 3x3 convolution, stride 1, zero same-padding.
    /// `x: B x C_in x H x W`, `w: C_out x C_in x 3 x 3`, `bias: C_out`.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Var) -> TensorResult<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 {
            return Err(TensorError::BadShape {
                op: "conv3x3 input",
                shape: sx.to_vec(),
            });
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[1] {
            return Err(TensorError::BadShape {
                op: "conv3x3 weight",
                shape: sw.to_vec(),
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(TensorError::BadShape {
                op: "conv3x3 bias",
                shape: sb.to_vec(),
            });
        }
        let (b, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let c_out = sw[0];
        let xv = self.values(x).to_vec();
        let wv = self.values(w).to_vec();
        let bv = self.values(bias).to_vec();
        let mut values = vec![0.0; b * c_out * h * wd];
        for bi in 0..b {
            for o in 0..c_out {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = bv[o];
                        for c in 0..c_in {
                            for u in 0..3 {
                                for v in 0..3 {
                                    let (ii, jj) = (i + u, j + v);
                                    if ii < 1 || jj < 1 || ii - 1 >= h || jj - 1 >= wd {
                                        continue;
                                    }
                                    acc += xv[((bi * c_in + c) * h + (ii - 1)) * wd + (jj - 1)]
                                        * wv[((o * c_in + c) * 3 + u) * 3 + v];
                                }
                            }
                        }
                        values[((bi * c_out + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(
            values,
            vec![b, c_out, h, wd],
            false,
            needs,
            Op::Conv3x3 { x, w, bias },
        ))
    }

    /// Rearrange a token sequence `B x T x D` (with `T == h*w`) into a
    /// channel-first grid `B x D x h x w`.
    pub fn tokens_to_grid(&mut self, x: Var, h: usize, w: usize) -> TensorResult<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] != h * w {
            return Err(TensorError::BadShape {
                op: "tokens_to_grid",
                shape: sx.to_vec(),
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.values(x);
        let mut values = vec![0.0; b * d * h * w];
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    values[((bi * d + di) * h + ti / w) * w + ti % w] =
                        xv[(bi * t + ti) * d + di];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            values,
            vec![b, d, h, w],
            false,
            needs,
            Op::TokensToGrid { x, h, w },
        ))
    }

    /// Drop the leading (pooled) token of a `B x T x D` sequence.
    pub fn drop_first_token(&mut self, x: Var) -> TensorResult<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] < 2 {
            return Err(TensorError::BadShape {
                op: "drop_first_token",
                shape: sx.to_vec(),
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.values(x);
        let mut values = Vec::with_capacity(b * (t - 1) * d);
        for bi in 0..b {
            values.extend_from_slice(&xv[(bi * t + 1) * d..(bi + 1) * t * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            values,
            vec![b, t - 1, d],
            false,
            needs,
            Op::DropFirstToken(x),
        ))
    }

    /// Reset every gradient buffer, so a subsequent backward pass starts
    /// from scratch. Without this, repeated backward passes accumulate.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Populate `grad` on every reachable `requires_grad` leaf with
    /// d(loss)/d(leaf). `loss` must be scalar (a single value).
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.node(loss).values.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.node(loss).shape.clone(),
            });
        }
        // Seed, then walk the tape in reverse creation order.
        self.accumulate(loss, &[1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.step_back(&op, Var(i), &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].values.len();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn step_back(&mut self, op: &Op, out: Var, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values(b))
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.values(a))
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(x, &dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    // dA = g @ B^T
                    let bv = self.values(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T @ g
                    let av = self.values(a);
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(x, g);
                if self.needs(bias) {
                    let cols = self.node(bias).values.len();
                    let rows = g.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Tanh(x) => {
                let yv = self.values(out).to_vec();
                let dx: Vec<f64> = g.iter().zip(&yv).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                self.accumulate(x, &dx);
            }
            Op::Exp(x) => {
                let yv = self.values(out).to_vec();
                let dx: Vec<f64> = g.iter().zip(&yv).map(|(gi, y)| gi * y).collect();
                self.accumulate(x, &dx);
            }
            Op::LnClamped(x) => {
                // Constant below the floor, 1/x above it.
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.values(x))
                    .map(|(gi, xi)| if *xi > PROB_FLOOR { gi / xi } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::RowSum(x) => {
                let sx = self.shape(x);
                let (rows, cols) = (sx[0], sx[1]);
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[r];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SubCol { x, col } => {
                self.accumulate(x, g);
                if self.needs(col) {
                    let cols = self.shape(x)[1];
                    let rows = self.shape(x)[0];
                    let mut dc = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            dc[r] -= g[r * cols + c];
                        }
                    }
                    self.accumulate(col, &dc);
                }
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.node(x).values.len()];
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(x, g);
            }
            Op::LogSoftmaxRows { x, tau } => {
                // dL/dx = (g - p * rowsum(g)) / tau, with p = exp(output).
                let sx = self.shape(x);
                let (rows, cols) = (sx[0], sx[1]);
                let yv = self.values(out).to_vec();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let p = yv[r * cols + c].exp();
                        dx[r * cols + c] = (g[r * cols + c] - p * gsum) / tau;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv3x3 { x, w, bias } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (b, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let c_out = sw[0];
                if self.needs(x) {
                    let wv = self.values(w).to_vec();
                    let mut dx = vec![0.0; b * c_in * h * wd];
                    for bi in 0..b {
                        for o in 0..c_out {
                            for i in 0..h {
                                for j in 0..wd {
                                    let go = g[((bi * c_out + o) * h + i) * wd + j];
                                    for c in 0..c_in {
                                        for u in 0..3 {
                                            for v in 0..3 {
                                                let (ii, jj) = (i + u, j + v);
                                                if ii < 1 || jj < 1 || ii - 1 >= h || jj - 1 >= wd
                                                {
                                                    continue;
                                                }
                                                dx[((bi * c_in + c) * h + (ii - 1)) * wd
                                                    + (jj - 1)] +=
                                                    go * wv[((o * c_in + c) * 3 + u) * 3 + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    let xv = self.values(x).to_vec();
                    let mut dw = vec![0.0; c_out * c_in * 9];
                    for bi in 0..b {
                        for o in 0..c_out {
                            for i in 0..h {
                                for j in 0..wd {
                                    let go = g[((bi * c_out + o) * h + i) * wd + j];
                                    for c in 0..c_in {
                                        for u in 0..3 {
                                            for v in 0..3 {
                                                let (ii, jj) = (i + u, j + v);
                                                if ii < 1 || jj < 1 || ii - 1 >= h || jj - 1 >= wd
                                                {
                                                    continue;
                                                }
                                                dw[((o * c_in + c) * 3 + u) * 3 + v] += go
                                                    * xv[((bi * c_in + c) * h + (ii - 1)) * wd
                                                        + (jj - 1)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; c_out];
                    for bi in 0..b {
                        for o in 0..c_out {
                            for i in 0..h {
                                for j in 0..wd {
                                    db[o] += g[((bi * c_out + o) * h + i) * wd + j];
                                }
                            }
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::TokensToGrid { x, h, w } => {
                let sx = self.shape(x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            dx[(bi * t + ti) * d + di] =
                                g[((bi * d + di) * h + ti / w) * w + ti % w];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::DropFirstToken(x) => {
                let sx = self.shape(x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    dx[(bi * t + 1) * d..(bi + 1) * t * d]
                        .copy_from_slice(&g[bi * (t - 1) * d..(bi + 1) * (t - 1) * d]);
                }
                self.accumulate(x, &dx);
            }
        }
    }
}

/// Plain 2-D matrix multiply on flat row-major slices.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    c
}

fn log_softmax_raw(row: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scaled.iter().map(|v| v - lse).collect()
}

/// Temperature softmax of a logit vector, computed with max-subtraction.
pub fn temp_softmax(logits: &[f64], tau: f64) -> TensorResult<Vec<f64>> {
    if logits.is_empty() {
        return Err(TensorError::EmptyInput("logits"));
    }
    if tau <= 0.0 {
        return Err(TensorError::NonPositiveTemperature { tau });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { label: "logits" });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `-ln(probs[target])`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: usize) -> TensorResult<f64> {
    if target >= probs.len() {
        return Err(TensorError::IndexOutOfRange {
            index: target,
            len: probs.len(),
        });
    }
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

/// `KL(p || q) = sum_k p_k ln(p_k / q_k)` with the `0 ln 0 = 0` convention
/// and `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> TensorResult<f64> {
    if p.len() != q.len() {
        return Err(TensorError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi.ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum())
}

/// Central-difference gradient of a scalar function of a flat vector:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
///
/// Verification oracle; keep `eps` in roughly `[1e-7, 1e-3]`.
pub fn finite_difference_grad<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max guarded relative error between an analytic and a reference gradient.
///
/// Coordinates where both magnitudes fall below `1e-6` are compared
/// absolutely, which keeps genuinely-zero gradients from blowing up the
/// ratio.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let scale = a.abs().max(r.abs());
            if scale < 1e-6 {
                (a - r).abs()
            } else {
                (a - r).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
