use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise maps. Several of these only exist so that the backward pass of
/// another map can itself be recorded and differentiated again.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Recip,
    NegRecipSq,
    Softplus,
    Sigmoid,
    SigmoidGrad,
    Silu,
    SiluGrad,
    SiluGrad2,
    Relu,
    Square,
    /// Conjugate of the chi-squared entropy: `x²/4 + x` for `x >= -2`, else `-1`.
    ChiConj,
    ChiConjGrad,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Recip => "recip",
            Unary::NegRecipSq => "neg_recip_sq",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::SigmoidGrad => "sigmoid_grad",
            Unary::Silu => "silu",
            Unary::SiluGrad => "silu_grad",
            Unary::SiluGrad2 => "silu_grad2",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::ChiConj => "chi_conj",
            Unary::ChiConjGrad => "chi_conj_grad",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Recip => 1.0 / x,
            Unary::NegRecipSq => -1.0 / (x * x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::SigmoidGrad => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Silu => x * sigmoid(x),
            Unary::SiluGrad => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::SiluGrad2 => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::ChiConj => {
                if x >= -2.0 {
                    0.25 * x * x + x
                } else {
                    -1.0
                }
            }
            Unary::ChiConjGrad => {
                if x >= -2.0 {
                    0.5 * x + 1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MinScalar(Var, f64),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Concat(Var, Var),
    SliceCols { src: Var, start: usize },
    PadCols { src: Var, left: usize },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Fill(Var),
    RowSqNorm(Var),
    RowSum(Var),
    BroadcastCol(Var),
    MulCol(Var, Var),
    ColSum(Var),
    BroadcastRows(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul { a, b, .. }
            | Op::Concat(a, b)
            | Op::MulCol(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MinScalar(a, _)
            | Op::SliceCols { src: a, .. }
            | Op::PadCols { src: a, .. }
            | Op::Unary(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Fill(a)
            | Op::RowSqNorm(a)
            | Op::RowSum(a)
            | Op::BroadcastCol(a)
            | Op::ColSum(a)
            | Op::BroadcastRows(a) => [Some(a), None],
        }
    }
}

/// The closed set of operations exposed through [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    ScalarMul(f64),
    MatMul,
    ConcatLastAxis,
    Square,
    Sum,
    Mean,
    Exp,
    Log,
    Softplus,
    Silu,
    Relu,
    RowSqNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::ScalarMul(1.5),
        OpKind::MatMul,
        OpKind::ConcatLastAxis,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Silu,
        OpKind::Relu,
        OpKind::RowSqNorm,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::MatMul | OpKind::ConcatLastAxis => 2,
            _ => 1,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of recorded operations.
///
/// Backward passes record their own operations on the same tape, so the
/// gradients they return are ordinary nodes and can be differentiated again.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, name: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(AutodiffError::BadRank {
                op: name,
                expected: "a matrix",
                shape: s.to_vec(),
            }),
        }
    }

    fn column_len(&self, name: &'static str, a: Var) -> Result<usize> {
        match self.shape(a) {
            [r, 1] => Ok(*r),
            s => Err(AutodiffError::BadRank {
                op: name,
                expected: "a column [n, 1]",
                shape: s.to_vec(),
            }),
        }
    }

    fn scalar_input(&self, name: &'static str, a: Var) -> Result<f64> {
        if !self.shape(a).is_empty() {
            return Err(AutodiffError::BadRank {
                op: name,
                expected: "a scalar",
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(self.value(a).item())
    }

    /// Dispatch for the public op set.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(AutodiffError::Arity {
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        let a = inputs[0];
        match op {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::ScalarMul(s) => self.scale(a, s),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::ConcatLastAxis => self.concat(a, inputs[1]),
            OpKind::Square => self.square(a),
            OpKind::Sum => self.sum(a),
            OpKind::Mean => self.mean(a),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::Softplus => self.softplus(a),
            OpKind::Silu => self.silu(a),
            OpKind::Relu => self.relu(a),
            OpKind::RowSqNorm => self.row_sq_norm(a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| s * x);
        self.push("scale", Op::Scale(a, s), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", Op::AddScalar(a), v)
    }

    /// `min(x, cap)` elementwise; the gradient is zero where the cap is active.
    pub fn min_scalar(&mut self, a: Var, cap: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.min(cap));
        self.push("min_scalar", Op::MinScalar(a, cap), v)
    }

    /// Adds a `[d]` bias to every row of an `[n, d]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("add_bias", a)?;
        if self.shape(bias) != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let v = Tensor::matrix(n, d, out)?;
        self.push("add_bias", Op::AddBias(a, bias), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = gemm(
            self.value(a).data(),
            (ar, ac),
            ta,
            self.value(b).data(),
            (br, bc),
            tb,
        );
        let v = Tensor::matrix(m, n, out)?;
        self.push("matmul", Op::MatMul { a, b, ta, tb }, v)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.matrix_dims("concat", a)?;
        let (nb, db) = self.matrix_dims("concat", b)?;
        if n != nb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&x[i * da..(i + 1) * da]);
            out.extend_from_slice(&y[i * db..(i + 1) * db]);
        }
        let v = Tensor::matrix(n, da + db, out)?;
        self.push("concat", Op::Concat(a, b), v)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("slice_cols", src)?;
        if start + width > d {
            return Err(AutodiffError::BadRank {
                op: "slice_cols",
                expected: "a column range inside the matrix",
                shape: self.shape(src).to_vec(),
            });
        }
        let x = self.value(src).data();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&x[i * d + start..i * d + start + width]);
        }
        let v = Tensor::matrix(n, width, out)?;
        self.push("slice_cols", Op::SliceCols { src, start }, v)
    }

    /// Places `src` at column offset `left` inside a zero matrix of `total` columns.
    pub fn pad_cols(&mut self, src: Var, left: usize, total: usize) -> Result<Var> {
        let (n, w) = self.matrix_dims("pad_cols", src)?;
        if left + w > total {
            return Err(AutodiffError::BadRank {
                op: "pad_cols",
                expected: "padding wide enough for the source",
                shape: self.shape(src).to_vec(),
            });
        }
        let x = self.value(src).data();
        let mut out = vec![0.0; n * total];
        for i in 0..n {
            out[i * total + left..i * total + left + w].copy_from_slice(&x[i * w..(i + 1) * w]);
        }
        let v = Tensor::matrix(n, total, out)?;
        self.push("pad_cols", Op::PadCols { src, left }, v)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let v = self.value(a).map(|x| f.eval(x));
        self.push(f.name(), Op::Unary(a, f), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Op::Mean(a), Tensor::scalar(s))
    }

    /// Broadcasts a scalar node to `shape`.
    pub fn fill(&mut self, scalar: Var, shape: &[usize]) -> Result<Var> {
        let s = self.scalar_input("fill", scalar)?;
        self.push("fill", Op::Fill(scalar), Tensor::full(shape, s))
    }

    /// Squared Euclidean norm of each row: `[n, d] -> [n, 1]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims("row_sq_norm", a)?;
        let out = self
            .value(a)
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect();
        self.push("row_sq_norm", Op::RowSqNorm(a), Tensor::column(out))
    }

    /// `[n, d] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims("row_sum", a)?;
        let out = self
            .value(a)
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().sum())
            .collect();
        self.push("row_sum", Op::RowSum(a), Tensor::column(out))
    }

    /// `[n, 1] -> [n, cols]`.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let n = self.column_len("broadcast_col", a)?;
        let x = self.value(a).data();
        let out = x
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        let v = Tensor::matrix(n, cols, out)?;
        self.push("broadcast_col", Op::BroadcastCol(a), v)
    }

    /// Scales row `i` of `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("mul_col", a)?;
        if self.column_len("mul_col", c)? != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_col",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for (row, s) in out.chunks_exact_mut(d).zip(cv) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let v = Tensor::matrix(n, d, out)?;
        self.push("mul_col", Op::MulCol(a, c), v)
    }

    /// Sum over rows: `[n, d] -> [d]`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims("col_sum", a)?;
        let mut out = vec![0.0; d];
        for row in self.value(a).data().chunks_exact(d) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        let v = Tensor::new(vec![d], out)?;
        self.push("col_sum", Op::ColSum(a), v)
    }

    /// `[d] -> [rows, d]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let d = match self.shape(a) {
            [d] => *d,
            s => {
                return Err(AutodiffError::BadRank {
                    op: "broadcast_rows",
                    expected: "a vector",
                    shape: s.to_vec(),
                })
            }
        };
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(x);
        }
        let v = Tensor::matrix(rows, d, out)?;
        self.push("broadcast_rows", Op::BroadcastRows(a), v)
    }

    fn mask(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let m = self.value(a).map(f);
        self.constant(m)
    }

    /// Gradients of the scalar `root` with respect to every differentiable leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let leaves: Vec<Var> = (0..=root.0)
            .map(Var)
            .filter(|v| matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].requires_grad)
            .collect();
        let grads = self.grad(root, &leaves)?;
        Ok(Gradients {
            entries: leaves.into_iter().zip(grads).collect(),
        })
    }

    /// Gradients of the scalar `root` with respect to `wrt`.
    ///
    /// `None` means the root does not depend on that input (zero gradient).
    /// The returned nodes are recorded on this graph and remain differentiable.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if !self.shape(root).is_empty() {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        let n = root.0 + 1;
        let mut relevant = vec![false; n];
        for v in wrt {
            if v.0 < n && self.nodes[v.0].requires_grad {
                relevant[v.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| relevant[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if relevant[root.0] {
            grads[root.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes[id].op;
            if !op.inputs().iter().flatten().any(|v| relevant[v.0]) {
                continue;
            }
            let mut contributions: [Option<(Var, Var)>; 2] = [None, None];
            let want = |v: Var| relevant[v.0];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if want(a) {
                        contributions[0] = Some((a, g));
                    }
                    if want(b) {
                        contributions[1] = Some((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        contributions[0] = Some((a, g));
                    }
                    if want(b) {
                        contributions[1] = Some((b, self.neg(g)?));
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        contributions[0] = Some((a, self.mul(g, b)?));
                    }
                    if want(b) {
                        contributions[1] = Some((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, s) => contributions[0] = Some((a, self.scale(g, s)?)),
                Op::AddScalar(a) => contributions[0] = Some((a, g)),
                Op::MinScalar(a, cap) => {
                    let m = self.mask(a, |x| if x < cap { 1.0 } else { 0.0 });
                    contributions[0] = Some((a, self.mul(g, m)?));
                }
                Op::AddBias(a, b) => {
                    if want(a) {
                        contributions[0] = Some((a, g));
                    }
                    if want(b) {
                        contributions[1] = Some((b, self.col_sum(g)?));
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    if want(a) {
                        let da = if ta {
                            self.matmul_t(b, g, tb, true)?
                        } else {
                            self.matmul_t(g, b, false, !tb)?
                        };
                        contributions[0] = Some((a, da));
                    }
                    if want(b) {
                        let db = if tb {
                            self.matmul_t(g, a, true, ta)?
                        } else {
                            self.matmul_t(a, g, !ta, false)?
                        };
                        contributions[1] = Some((b, db));
                    }
                }
                Op::Concat(a, b) => {
                    let da = self.shape(a)[1];
                    let db = self.shape(b)[1];
                    if want(a) {
                        contributions[0] = Some((a, self.slice_cols(g, 0, da)?));
                    }
                    if want(b) {
                        contributions[1] = Some((b, self.slice_cols(g, da, db)?));
                    }
                }
                Op::SliceCols { src, start } => {
                    let total = self.shape(src)[1];
                    contributions[0] = Some((src, self.pad_cols(g, start, total)?));
                }
                Op::PadCols { src, left } => {
                    let w = self.shape(src)[1];
                    contributions[0] = Some((src, self.slice_cols(g, left, w)?));
                }
                Op::Unary(a, f) => {
                    let d = self.unary_derivative(Var(id), a, f)?;
                    contributions[0] = Some((a, self.mul(g, d)?));
                }
                Op::Sum(a) => {
                    let shape = self.shape(a).to_vec();
                    contributions[0] = Some((a, self.fill(g, &shape)?));
                }
                Op::Mean(a) => {
                    let shape = self.shape(a).to_vec();
                    let count = self.value(a).len() as f64;
                    let s = self.scale(g, 1.0 / count)?;
                    contributions[0] = Some((a, self.fill(s, &shape)?));
                }
                Op::Fill(a) => contributions[0] = Some((a, self.sum(g)?)),
                Op::RowSqNorm(a) => {
                    let t = self.mul_col(a, g)?;
                    contributions[0] = Some((a, self.scale(t, 2.0)?));
                }
                Op::RowSum(a) => {
                    let d = self.shape(a)[1];
                    contributions[0] = Some((a, self.broadcast_col(g, d)?));
                }
                Op::BroadcastCol(a) => contributions[0] = Some((a, self.row_sum(g)?)),
                Op::MulCol(a, c) => {
                    if want(a) {
                        contributions[0] = Some((a, self.mul_col(g, c)?));
                    }
                    if want(c) {
                        let ga = self.mul(g, a)?;
                        contributions[1] = Some((c, self.row_sum(ga)?));
                    }
                }
                Op::ColSum(a) => {
                    let rows = self.shape(a)[0];
                    contributions[0] = Some((a, self.broadcast_rows(g, rows)?));
                }
                Op::BroadcastRows(a) => contributions[0] = Some((a, self.col_sum(g)?)),
            }
            for (input, c) in contributions.into_iter().flatten() {
                grads[input.0] = Some(match grads[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| if v.0 < n { grads[v.0] } else { None })
            .collect())
    }

    fn unary_derivative(&mut self, out: Var, a: Var, f: Unary) -> Result<Var> {
        match f {
            Unary::Exp => Ok(out),
            Unary::Log => self.unary(a, Unary::Recip),
            Unary::Recip => self.unary(a, Unary::NegRecipSq),
            Unary::Softplus => self.unary(a, Unary::Sigmoid),
            Unary::Sigmoid => self.unary(a, Unary::SigmoidGrad),
            Unary::Silu => self.unary(a, Unary::SiluGrad),
            Unary::SiluGrad => self.unary(a, Unary::SiluGrad2),
            Unary::Square => self.scale(a, 2.0),
            Unary::ChiConj => self.unary(a, Unary::ChiConjGrad),
            Unary::Relu => Ok(self.mask(a, |x| if x > 0.0 { 1.0 } else { 0.0 })),
            Unary::ChiConjGrad => Ok(self.mask(a, |x| if x >= -2.0 { 0.5 } else { 0.0 })),
            Unary::NegRecipSq | Unary::SigmoidGrad | Unary::SiluGrad2 => {
                Err(AutodiffError::HigherOrder { op: f.name() })
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, Option<Var>)>,
}

impl Gradients {
    /// The gradient node for `leaf`, if the root depends on it.
    pub fn node(&self, leaf: Var) -> Option<Var> {
        self.entries
            .iter()
            .find(|(v, _)| *v == leaf)
            .and_then(|(_, g)| *g)
    }

    /// Gradient value for `leaf`; zeros for leaves the root does not depend on.
    pub fn tensor(&self, graph: &Graph, leaf: Var) -> Tensor {
        match self.node(leaf) {
            Some(g) => graph.value(g).clone(),
            None => Tensor::zeros(graph.shape(leaf)),
        }
    }

    /// `(leaf id, gradient)` pairs in leaf order.
    pub fn to_map(&self, graph: &Graph) -> Vec<(usize, Tensor)> {
        self.entries
            .iter()
            .map(|(v, _)| (v.id(), self.tensor(graph, *v)))
            .collect()
    }
}

fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    // SAFETY: strides describe exactly the row-major buffers above, whose
    // lengths were validated against the shapes by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
