use super::{Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation that produced a node, with its parents.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x (b x n) + bias (n)` with the bias repeated on every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    /// Row sums of a 2-D tensor, `b x n -> b x 1`.
    SumCols(Var),
    /// Concatenation of 2-D tensors along the last axis.
    Concat(Vec<Var>),
    SliceCols { src: Var, start: usize, end: usize },
    /// A scalar repeated to a target shape.
    Expand(Var),
    LogSoftmax(Var),
}

impl OpKind {
    fn parents(&self) -> Vec<Var> {
        use OpKind::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Offset(a, _) | Relu(a) | Softplus(a) | Exp(a) | Log(a) | Square(a)
            | Sqrt(a) | Sum(a) | Mean(a) | SumCols(a) | Expand(a) | LogSoftmax(a) => vec![*a],
            SliceCols { src, .. } => vec![*src],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: OpKind,
    value: Tensor,
}

/// Append-only computation graph with reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every parent precedes its child and
/// the reverse sweep is a single backwards walk over the node list.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    last_root: Option<Var>,
    op_count: u64,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add and elementwise operations performed by forward passes so
    /// far. Matrix products count `m * k * n`, everything else one per output
    /// element.
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    /// Records an input tensor. Leaves are the only nodes whose gradients are
    /// usually read back (parameters, inputs under sensitivity analysis).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> &OpKind {
        &self.nodes[var.0].op
    }

    fn push(&mut self, op: OpKind, value: Tensor) -> Var {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: OpKind, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.op_count += value.len() as u64;
        self.push(op, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let k = self.value(a).cols() as u64;
        self.op_count += value.len() as u64 * k;
        Ok(self.push(OpKind::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::Mul(a, b), value))
    }

    /// Elementwise quotient; a zero denominator is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "zero denominator".into(),
            });
        }
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::Div(a, b), value))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !is_matrix(xv) || bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(mismatch("add_row", xv, bv));
        }
        let cols = xv.cols();
        let mut value = xv.clone();
        for (i, v) in value.data.iter_mut().enumerate() {
            *v += bv.data[i % cols];
        }
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::AddRow(x, bias), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, OpKind::Scale(a, factor), |x| x * factor)
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        self.unary(a, OpKind::Offset(a, shift), |x| x + shift)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, OpKind::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln1p(e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, OpKind::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, OpKind::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> TensorResult<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        Ok(self.unary(a, OpKind::Log(a), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, OpKind::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> TensorResult<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "non-positive input".into(),
            });
        }
        Ok(self.unary(a, OpKind::Sqrt(a), f64::sqrt))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, value) = (v.len() as u64, Tensor::scalar(v.sum()));
        self.op_count += n;
        self.push(OpKind::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, value) = (v.len() as u64, Tensor::scalar(v.mean()));
        self.op_count += n;
        self.push(OpKind::Mean(a), value)
    }

    pub fn sum_cols(&mut self, a: Var) -> TensorResult<Var> {
        let v = self.value(a);
        if !is_matrix(v) {
            return Err(TensorError::Invalid {
                op: "sum_cols",
                detail: format!("expected a matrix, got {:?}", v.shape()),
            });
        }
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let n = v.len() as u64;
        let value = Tensor::column(data);
        self.op_count += n;
        Ok(self.push(OpKind::SumCols(a), value))
    }

    pub fn concat(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p),
            None => {
                return Err(TensorError::Invalid {
                    op: "concat",
                    detail: "no inputs".into(),
                })
            }
        };
        let rows = first.rows();
        for &p in parts {
            let v = self.value(p);
            if !is_matrix(v) || v.rows() != rows {
                return Err(mismatch("concat", first, v));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.op_count += data.len() as u64;
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(OpKind::Concat(parts.to_vec()), value))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> TensorResult<Var> {
        let v = self.value(src);
        if !is_matrix(v) || start >= end || end > v.cols() {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("range {start}..{end} out of bounds for {:?}", v.shape()),
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        self.op_count += data.len() as u64;
        let value = Tensor::matrix(rows, end - start, data)?;
        Ok(self.push(OpKind::SliceCols { src, start, end }, value))
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value(a);
        if v.len() != 1 {
            return Err(TensorError::Invalid {
                op: "expand",
                detail: format!("expected a scalar, got {:?}", v.shape()),
            });
        }
        let value = Tensor::full(shape, v.item());
        self.op_count += value.len() as u64;
        Ok(self.push(OpKind::Expand(a), value))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> TensorResult<Var> {
        let v = self.value(a);
        if !is_matrix(v) {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                detail: format!("expected a matrix, got {:?}", v.shape()),
            });
        }
        let mut value = v.clone();
        let cols = v.cols();
        for row in value.data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.op_count += 3 * value.len() as u64;
        Ok(self.push(OpKind::LogSoftmax(a), value))
    }

    /// Reverse sweep from a one-element `root`. Gradients from earlier sweeps
    /// are discarded; fan-out contributions accumulate by summation.
    pub fn backward(&mut self, root: Var) -> TensorResult<()> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[root.0] = Some(Tensor::ones(&root_shape));
        for idx in (0..=root.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.grads[idx] = Some(grad);
        }
        self.last_root = Some(root);
        Ok(())
    }

    /// Gradient accumulated at `var` by the last [`Graph::backward`]; zeros if
    /// `var` was unreachable from that root.
    pub fn grad(&self, var: Var) -> Tensor {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()))
    }

    /// `d root / d leaf`, running the reverse sweep if `root` was not the last
    /// one differentiated.
    pub fn grad_wrt(&mut self, root: Var, leaf: Var) -> TensorResult<Tensor> {
        if self.last_root != Some(root) {
            self.backward(root)?;
        }
        Ok(self.grad(leaf))
    }

    fn accumulate(&mut self, var: Var, contribution: Tensor) {
        match &mut self.grads[var.0] {
            Some(existing) => existing
                .data
                .iter_mut()
                .zip(&contribution.data)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) {
        use OpKind::*;
        let op = self.nodes[idx].op.clone();
        match op {
            Leaf => {}
            MatMul(a, b) => {
                let da = grad
                    .matmul(&self.value(b).transpose())
                    .expect("matmul backward shapes");
                let db = self
                    .value(a)
                    .transpose()
                    .matmul(grad)
                    .expect("matmul backward shapes");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Add(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Sub(a, b) => {
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.map(|g| -g));
            }
            Mul(a, b) => {
                let da = zip_map(grad, self.value(b), |g, y| g * y);
                let db = zip_map(grad, self.value(a), |g, x| g * x);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Div(a, b) => {
                let out = &self.nodes[idx].value;
                let denom = self.value(b);
                let da = zip_map(grad, denom, |g, y| g / y);
                let mut db = zip_map(grad, out, |g, q| -g * q);
                db.data
                    .iter_mut()
                    .zip(&denom.data)
                    .for_each(|(d, y)| *d /= y);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            AddRow(x, bias) => {
                let cols = grad.cols();
                let mut db = vec![0.0; cols];
                for row in grad.data.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                self.accumulate(x, grad.clone());
                self.accumulate(bias, Tensor::vector(db));
            }
            Scale(a, factor) => self.accumulate(a, grad.map(|g| g * factor)),
            Offset(a, _) => self.accumulate(a, grad.clone()),
            Relu(a) => {
                // Subgradient 0 at the kink.
                let d = zip_map(grad, self.value(a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(a, d);
            }
            Softplus(a) => {
                let d = zip_map(grad, self.value(a), |g, x| g * sigmoid(x));
                self.accumulate(a, d);
            }
            Exp(a) => {
                let d = zip_map(grad, &self.nodes[idx].value, |g, y| g * y);
                self.accumulate(a, d);
            }
            Log(a) => {
                let d = zip_map(grad, self.value(a), |g, x| g / x);
                self.accumulate(a, d);
            }
            Square(a) => {
                let d = zip_map(grad, self.value(a), |g, x| 2.0 * g * x);
                self.accumulate(a, d);
            }
            Sqrt(a) => {
                let d = zip_map(grad, &self.nodes[idx].value, |g, y| g / (2.0 * y));
                self.accumulate(a, d);
            }
            Sum(a) => {
                let g = grad.item();
                let d = Tensor::full(self.value(a).shape(), g);
                self.accumulate(a, d);
            }
            Mean(a) => {
                let v = self.value(a);
                let d = Tensor::full(v.shape(), grad.item() / v.len() as f64);
                self.accumulate(a, d);
            }
            SumCols(a) => {
                let v = self.value(a);
                let cols = v.cols();
                let data = grad
                    .data
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, cols))
                    .collect();
                let d = Tensor {
                    shape: v.shape().to_vec(),
                    data,
                };
                self.accumulate(a, d);
            }
            Concat(parts) => {
                let rows = grad.rows();
                let total = grad.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&grad.data[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    let d = Tensor {
                        shape: vec![rows, w],
                        data,
                    };
                    self.accumulate(p, d);
                }
            }
            SliceCols { src, start, end } => {
                let v = self.value(src);
                let (rows, cols) = (v.rows(), v.cols());
                let width = end - start;
                let mut d = Tensor::zeros(v.shape());
                for r in 0..rows {
                    d.data[r * cols + start..r * cols + end]
                        .copy_from_slice(&grad.data[r * width..(r + 1) * width]);
                }
                self.accumulate(src, d);
            }
            Expand(a) => {
                let d = Tensor::full(self.value(a).shape(), grad.sum());
                self.accumulate(a, d);
            }
            LogSoftmax(a) => {
                let out = &self.nodes[idx].value;
                let cols = out.cols();
                let mut d = grad.clone();
                for (drow, orow) in d.data.chunks_mut(cols).zip(out.data.chunks(cols)) {
                    let total: f64 = drow.iter().sum();
                    drow.iter_mut()
                        .zip(orow)
                        .for_each(|(g, &y)| *g -= y.exp() * total);
                }
                self.accumulate(a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0]);
        let y = g.softplus(x);
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
        let root = g.sum(y);
        g.backward(root).unwrap();
        assert!((g.grad(x).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_does_not_overflow() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[800.0, -800.0]);
        let y = g.softplus(x);
        assert_eq!(g.value(y).data()[0], 800.0);
        assert!(g.value(y).data()[1] >= 0.0);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let sq = g.square(x);
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x at x = 3 -> dy/dx = 7
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 7.0);
    }

    #[test]
    fn linear_scalar_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.7));
        let y = g.scale(z, 3.0);
        assert_eq!(g.grad_wrt(y, z).unwrap().item(), 3.0);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[5.0, 6.0]);
        let root = g.sum(a);
        let gb = g.grad_wrt(root, b).unwrap();
        assert_eq!(gb.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn root_gradient_is_one() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let root = g.mean(a);
        g.backward(root).unwrap();
        assert_eq!(g.grad(root).item(), 1.0);
    }

    #[test]
    fn domain_errors_for_log_and_sqrt() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 0.0]);
        assert!(matches!(g.log(a), Err(TensorError::Domain { op: "log", .. })));
        assert!(matches!(g.sqrt(a), Err(TensorError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_counts_multiply_adds() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[4, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.op_count(), 60);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert!((g.value(y).get(1, 0) + 3f64.ln()).abs() < 1e-15);
    }
}
