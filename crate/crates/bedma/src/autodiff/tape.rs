use super::tensor::{dot, AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
///
/// A `Var` is only meaningful with the tape that produced it; mixing
/// handles across tapes is a logic error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    Row(Var, usize),
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Adjoints produced by [`Tape::backward`].
///
/// Every node on the tape has an entry shaped like its value; nodes the
/// loss does not depend on hold zeros.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`.
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

/// A define-by-run gradient tape.
///
/// Operations append nodes and return [`Var`] handles. The tape is meant
/// to live for a single forward/backward pass and then be dropped.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input node. Leaves receive gradients but have no inputs.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Records a rank-0 input node.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary_elementwise(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise quotient; follows IEEE semantics for zero denominators.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary_elementwise("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, |x| -x);
        self.push(Op::Neg(a), v)
    }

    /// Elementwise absolute value; the derivative at zero is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, f64::abs);
        self.push(Op::Abs(a), v)
    }

    /// Logistic sigmoid `1 / (1 + exp(-x))`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Rectifier `max(x, 0)`; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|v| **v <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("input {bad} is not strictly positive"),
            });
        }
        let v = self.unary_elementwise(a, f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, |x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Elementwise square root; every element must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|v| **v < 0.0) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                detail: format!("input {bad} is negative"),
            });
        }
        let v = self.unary_elementwise(a, f64::sqrt);
        Ok(self.push(Op::Sqrt(a), v))
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.unary_elementwise(a, softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_elementwise(a, |x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    /// Addition of a scalar constant to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary_elementwise(a, |x| x + c);
        self.push(Op::AddConst(a), v)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        require_rank("matmul", ta, 2)?;
        require_rank("matmul", tb, 2)?;
        if ta.cols() != tb.rows() {
            return Err(AutodiffError::InnerDimMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let v = matmul_values(ta, tb);
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// Product of a rank-2 tensor with a rank-1 tensor.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, AutodiffError> {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        require_rank("matvec", tw, 2)?;
        require_rank("matvec", tx, 1)?;
        if tw.cols() != tx.len() {
            return Err(AutodiffError::InnerDimMismatch {
                op: "matvec",
                lhs: tw.shape().to_vec(),
                rhs: tx.shape().to_vec(),
            });
        }
        let out: Vec<f64> = (0..tw.rows()).map(|i| dot(tw.row_slice(i), tx.data())).collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        require_rank("transpose", ta, 2)?;
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.get2(i, j);
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?))
    }

    /// Row-wise softmax with max-subtraction for stability.
    ///
    /// Accepts a rank-2 tensor (each row normalized independently) or a
    /// rank-1 tensor treated as a single row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(AutodiffError::RankMismatch {
                op: "softmax_rows",
                expected: 2,
                shape: ta.shape().to_vec(),
            });
        }
        let cols = *ta.shape().last().expect("rank >= 1");
        if cols == 0 {
            return Err(AutodiffError::EmptyOperands { op: "softmax_rows" });
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    /// Concatenates rank-1 tensors into one longer rank-1 tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyOperands { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            require_rank("concat", t, 1)?;
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    /// Stacks equal-length rank-1 tensors as the rows of a rank-2 tensor.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyOperands { op: "stack_rows" });
        }
        let cols = {
            let first = &self.nodes[parts[0].0].value;
            require_rank("stack_rows", first, 1)?;
            first.len()
        };
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            let t = &self.nodes[p.0].value;
            require_rank("stack_rows", t, 1)?;
            if t.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![cols],
                    rhs: vec![t.len()],
                });
            }
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![parts.len(), cols], data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), v))
    }

    /// Stacks rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyOperands { op: "concat_rows" });
        }
        let cols = {
            let first = &self.nodes[parts[0].0].value;
            require_rank("concat_rows", first, 2)?;
            first.cols()
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            require_rank("concat_rows", t, 2)?;
            if t.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: vec![t.cols()],
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Joins rank-2 tensors with equal row counts along the column axis,
    /// preserving argument order left to right.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyOperands { op: "concat_cols" });
        }
        let rows = {
            let first = &self.nodes[parts[0].0].value;
            require_rank("concat_cols", first, 2)?;
            first.rows()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            require_rank("concat_cols", t, 2)?;
            if t.rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![t.rows()],
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(t.row_slice(r));
            }
            offset += w;
        }
        let v = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Copies rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        require_rank("slice_rows", ta, 2)?;
        if start >= end || end > ta.rows() {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "slice_rows",
                index: end.saturating_sub(1),
                bound: ta.rows(),
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..end * c].to_vec();
        let v = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(Op::SliceRows(a, start, end), v))
    }

    /// Copies row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, AutodiffError> {
        let ta = &self.nodes[a.0].value;
        require_rank("row", ta, 2)?;
        if i >= ta.rows() {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "row",
                index: i,
                bound: ta.rows(),
            });
        }
        let v = Tensor::vector(ta.row_slice(i).to_vec());
        Ok(self.push(Op::Row(a, i), v))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = seq_sum(self.nodes[a.0].value.data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(AutodiffError::EmptyOperands { op: "mean" });
        }
        let s = seq_sum(t.data()) / t.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    /// Reverse pass from a scalar `loss` node.
    ///
    /// Returns one adjoint per tape node, shaped like the node's value;
    /// nodes that do not feed the loss keep zero gradients. The tape
    /// itself is unchanged, so `backward` can be called more than once.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        let mut reached = vec![false; self.nodes.len()];
        grads[loss.0].data_mut()[0] = 1.0;
        reached[loss.0] = true;

        for id in (0..=loss.0).rev() {
            if !reached[id] {
                continue;
            }
            // Inputs always precede their consumers, so splitting at `id`
            // gives mutable access to every input adjoint while the node's
            // own adjoint is read from the tail.
            let (head, tail) = grads.split_at_mut(id);
            let g = &tail[0];
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut head[a.0], g.data());
                    acc(&mut head[b.0], g.data());
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Sub(a, b) => {
                    acc(&mut head[a.0], g.data());
                    acc_scaled(&mut head[b.0], -1.0, g.data());
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Mul(a, b) => {
                    // Hadamard product: each side is weighted by the other.
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc_product(&mut head[a.0], g.data(), bv.data());
                    acc_product(&mut head[b.0], g.data(), av.data());
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        da[i] += g.data()[i] / bv.data()[i];
                    }
                    let db = head[b.0].data_mut();
                    for i in 0..db.len() {
                        let bi = bv.data()[i];
                        db[i] -= g.data()[i] * av.data()[i] / (bi * bi);
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Neg(a) => {
                    acc_scaled(&mut head[a.0], -1.0, g.data());
                    reached[a.0] = true;
                }
                Op::Abs(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        let s = if av.data()[i] > 0.0 {
                            1.0
                        } else if av.data()[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        da[i] += s * g.data()[i];
                    }
                    reached[a.0] = true;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        let yi = y.data()[i];
                        da[i] += g.data()[i] * yi * (1.0 - yi);
                    }
                    reached[a.0] = true;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        let yi = y.data()[i];
                        da[i] += g.data()[i] * (1.0 - yi * yi);
                    }
                    reached[a.0] = true;
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        if av.data()[i] > 0.0 {
                            da[i] += g.data()[i];
                        }
                    }
                    reached[a.0] = true;
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        da[i] += g.data()[i] / av.data()[i];
                    }
                    reached[a.0] = true;
                }
                Op::Exp(a) => {
                    acc_product(&mut head[a.0], g.data(), node.value.data());
                    reached[a.0] = true;
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        da[i] += 2.0 * av.data()[i] * g.data()[i];
                    }
                    reached[a.0] = true;
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        da[i] += g.data()[i] / (2.0 * y.data()[i]);
                    }
                    reached[a.0] = true;
                }
                Op::Softplus(a) => {
                    // d/dx ln(1 + e^x) = sigmoid(x)
                    let av = &self.nodes[a.0].value;
                    let da = head[a.0].data_mut();
                    for i in 0..da.len() {
                        let s = 1.0 / (1.0 + (-av.data()[i]).exp());
                        da[i] += g.data()[i] * s;
                    }
                    reached[a.0] = true;
                }
                Op::Scale(a, c) => {
                    acc_scaled(&mut head[a.0], *c, g.data());
                    reached[a.0] = true;
                }
                Op::AddConst(a) => {
                    acc(&mut head[a.0], g.data());
                    reached[a.0] = true;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA += G B^T
                    {
                        let da = head[a.0].data_mut();
                        for i in 0..m {
                            for l in 0..k {
                                da[i * k + l] += dot(
                                    &g.data()[i * n..(i + 1) * n],
                                    &bv.data()[l * n..(l + 1) * n],
                                );
                            }
                        }
                    }
                    // dB += A^T G
                    {
                        let db = head[b.0].data_mut();
                        for i in 0..m {
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for l in 0..k {
                                let ail = av.data()[i * k + l];
                                if ail != 0.0 {
                                    let drow = &mut db[l * n..(l + 1) * n];
                                    for (d, &gv) in drow.iter_mut().zip(grow) {
                                        *d += ail * gv;
                                    }
                                }
                            }
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MatVec(w, x) => {
                    let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
                    let (m, k) = (wv.rows(), wv.cols());
                    {
                        // dW += g x^T (outer product, row by row)
                        let dw = head[w.0].data_mut();
                        for i in 0..m {
                            let gi = g.data()[i];
                            if gi != 0.0 {
                                let drow = &mut dw[i * k..(i + 1) * k];
                                for (d, &xj) in drow.iter_mut().zip(xv.data()) {
                                    *d += gi * xj;
                                }
                            }
                        }
                    }
                    {
                        // dx += W^T g
                        let dx = head[x.0].data_mut();
                        for i in 0..m {
                            let gi = g.data()[i];
                            if gi != 0.0 {
                                for (d, &wij) in dx.iter_mut().zip(wv.row_slice(i)) {
                                    *d += gi * wij;
                                }
                            }
                        }
                    }
                    reached[w.0] = true;
                    reached[x.0] = true;
                }
                Op::Transpose(a) => {
                    let (r, c) = {
                        let av = &self.nodes[a.0].value;
                        (av.rows(), av.cols())
                    };
                    let da = head[a.0].data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g.data()[j * r + i];
                        }
                    }
                    reached[a.0] = true;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = *y.shape().last().expect("rank >= 1");
                    let da = head[a.0].data_mut();
                    for ((drow, yrow), grow) in da
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                    reached[a.0] = true;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = head[p.0].len();
                        acc(&mut head[p.0], &g.data()[offset..offset + len]);
                        offset += len;
                        reached[p.0] = true;
                    }
                }
                Op::StackRows(parts) => {
                    let cols = node.value.cols();
                    for (r, &p) in parts.iter().enumerate() {
                        acc(&mut head[p.0], &g.data()[r * cols..(r + 1) * cols]);
                        reached[p.0] = true;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let len = head[p.0].len();
                        acc(&mut head[p.0], &g.data()[offset * cols..offset * cols + len]);
                        offset += len / cols;
                        reached[p.0] = true;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = head[p.0].cols();
                        let dp = head[p.0].data_mut();
                        for r in 0..rows {
                            let grow = &g.data()[r * total + offset..r * total + offset + w];
                            acc_slice(&mut dp[r * w..(r + 1) * w], grow);
                        }
                        offset += w;
                        reached[p.0] = true;
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let c = node.value.cols();
                    let da = head[a.0].data_mut();
                    acc_slice(&mut da[start * c..start * c + g.data().len()], g.data());
                    reached[a.0] = true;
                }
                Op::Row(a, i) => {
                    let c = g.data().len();
                    let da = head[a.0].data_mut();
                    acc_slice(&mut da[i * c..(i + 1) * c], g.data());
                    reached[a.0] = true;
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    for d in head[a.0].data_mut() {
                        *d += gv;
                    }
                    reached[a.0] = true;
                }
                Op::Mean(a) => {
                    let n = head[a.0].len() as f64;
                    let gv = g.item() / n;
                    for d in head[a.0].data_mut() {
                        *d += gv;
                    }
                    reached[a.0] = true;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `ln(1 + exp(x))` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fixed-order sum (sequential, deterministic).
fn seq_sum(data: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in data {
        s += v;
    }
    s
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), AutodiffError> {
    if t.rank() != rank {
        return Err(AutodiffError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b.data()[l * n..(l + 1) * n];
            for (o, &blj) in orow.iter_mut().zip(brow) {
                *o += ail * blj;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul output shape")
}

fn acc(dst: &mut Tensor, src: &[f64]) {
    acc_slice(dst.data_mut(), src);
}

fn acc_slice(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn acc_scaled(dst: &mut Tensor, c: f64, src: &[f64]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += c * s;
    }
}

fn acc_product(dst: &mut Tensor, a: &[f64], b: &[f64]) {
    for (i, d) in dst.data_mut().iter_mut().enumerate() {
        *d += a[i] * b[i];
    }
}
