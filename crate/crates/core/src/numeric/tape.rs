//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are stored on the tape and addressed through copyable [`Var`] handles.
//! Trainable tensors enter through [`Tape::param`], which remembers the
//! [`ParamId`] so that [`Tape::backward`] can report per-parameter gradients.
//! Backward never mutates the tape, so replaying it is bit-for-bit stable.

use crate::error::{CvseError, Result};
use crate::numeric::matrix::Matrix;

/// Index of a trainable tensor inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Softmax(Var, f64),
    Sum(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Stack(Vec<Var>),
    Normalize(Var),
    RowMax(Var, Vec<usize>),
    Diag(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
    params: Vec<Option<Var>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for a leaf node, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.by_node[var.0].as_ref()
    }

    /// Gradient for a parameter; exactly zero when the parameter was never
    /// reached (or never registered on the tape).
    pub fn param(&self, id: ParamId, shape: (usize, usize)) -> Matrix {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.by_node[v.0].clone())
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Whether the parameter was registered on the tape and reached by backward.
    pub fn reached(&self, id: ParamId) -> bool {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .is_some_and(|v| self.by_node[v.0].is_some())
    }

    /// Shapes of the registered nodes, for diagnostics.
    pub fn node_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Tracked parameter. Registering the same id twice returns the first handle.
    pub fn param(&mut self, id: ParamId, value: &Matrix) -> Var {
        if let Some(Some(v)) = self.params.get(id.0) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param);
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        self.params[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, mr) = (self.value(a), self.value(row));
        if mr.rows() != 1 || mr.cols() != ma.cols() {
            return Err(CvseError::shape("add_row", ma.shape(), mr.shape()));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(mr.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Adds a `rows×1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ma, mc) = (self.value(a), self.value(col));
        if mc.cols() != 1 || mc.rows() != ma.rows() {
            return Err(CvseError::shape("add_col", ma.shape(), mc.shape()));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            let c = mc.data()[r];
            value.row_mut(r).iter_mut().for_each(|o| *o += c);
        }
        Ok(self.push(value, Op::AddCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Natural log; inputs must be strictly positive (clamp first).
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(CvseError::Degenerate("log of a non-positive value".into()));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(value, Op::Ln(a)))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    /// Row-wise softmax of `temperature · a`.
    pub fn row_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let value = crate::numeric::matrix::row_softmax(self.value(a), temperature)?;
        Ok(self.push(value, Op::Softmax(a, temperature)))
    }

    /// Sum of all entries as a `1×1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean over rows, giving a `1×cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(CvseError::Degenerate("mean of zero rows".into()));
        }
        let mut value = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, x) in value.data_mut().iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let value = value.scale(1.0 / m.rows() as f64);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Rows of `a` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(CvseError::shape("gather_rows", m.shape(), (bad, 0)));
        }
        let value = m.gather_rows(indices);
        Ok(self.push(value, Op::Gather(a, indices.to_vec())))
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| CvseError::Degenerate("stacking zero parts".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(CvseError::shape("stack_rows", (rows, cols), m.shape()));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec())))
    }

    /// Scales every row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = crate::numeric::matrix::norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(CvseError::Degenerate(format!("cannot normalise zero row {r}")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(self.push(value, Op::Normalize(a)))
    }

    /// Per-row maximum as a `rows×1` column; ties resolve to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.cols() == 0 {
            return Err(CvseError::Degenerate("row max over zero columns".into()));
        }
        let mut arg = Vec::with_capacity(m.rows());
        let mut value = Matrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
            for (c, &x) in m.row(r).iter().enumerate() {
                if x > best {
                    best = x;
                    best_c = c;
                }
            }
            arg.push(best_c);
            value[(r, 0)] = best;
        }
        Ok(self.push(value, Op::RowMax(a, arg)))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(CvseError::shape("diag", m.shape(), (m.cols(), m.rows())));
        }
        let value = Matrix::from_vec(m.rows(), 1, (0..m.rows()).map(|i| m[(i, i)]).collect())?;
        Ok(self.push(value, Op::Diag(a)))
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(CvseError::shape("scalar", m.shape(), (1, 1)));
        }
        Ok(m.data()[0])
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.scalar(loss)?;
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                // Leaf gradients are kept so callers can read them back.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a·bᵀ ⇒ da = g·b, db = gᵀ·a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddCol(a, col) => {
                    let gc = Matrix::from_vec(
                        g.rows(),
                        1,
                        (0..g.rows()).map(|r| g.row(r).iter().sum()).collect(),
                    )?;
                    accumulate(&mut grads, *col, gc);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh", |x, t| x * (1.0 - t * t))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |x, p| if p > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(self.value(*a), "ln", |x, p| x / p)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let f = *floor;
                    let ga = g.zip_map(self.value(*a), "clamp", |x, p| if p > f { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a, t) => {
                    let s = &node.value;
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let inner: f64 = sr.iter().zip(gr).map(|(p, x)| p * x).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = t * sr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let scaled = g.scale(1.0 / r as f64);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(scaled.data());
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, indices) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut grads, p, g.gather_rows(&idx));
                        offset += rows;
                    }
                }
                Op::Normalize(a) => {
                    // y = x/‖x‖ ⇒ dx = (g − y·⟨g, y⟩)/‖x‖
                    let (x, y) = (self.value(*a), &node.value);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = crate::numeric::matrix::norm(x.row(r));
                        let inner = crate::numeric::matrix::dot(g.row(r), y.row(r));
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = (g[(r, c)] - y[(r, c)] * inner) / n;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowMax(a, arg) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (i, &j) in arg.iter().enumerate() {
                        ga[(i, j)] = g[(i, 0)];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let n = self.shape(*a).0;
                    let mut ga = Matrix::zeros(n, n);
                    for i in 0..n {
                        ga[(i, i)] = g[(i, 0)];
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), x);
        let loss = build(&mut tape, v);
        let analytic = tape.backward(loss).unwrap().param(ParamId(0), x.shape());
        let numeric = numeric_grad(x, &|m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param(ParamId(0), m);
            let l = build(&mut t, v);
            t.scalar(l).unwrap()
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}\n{analytic:?}\n{numeric:?}");
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // loss = sum(W·x) ⇒ dL/dW_ij = x_j
        let w = random(3, 4, 1);
        let x = Matrix::from_vec(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(0), &w);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap().param(ParamId(0), w.shape());
        for i in 0..3 {
            assert_eq!(g.row(i), x.data());
        }
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let w = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let mut tape = Tape::new();
        let wv = tape.param(ParamId(0), &w);
        let x = tape.constant(Matrix::from_rows(&[&[-1.0, -1.0]]));
        let pre = tape.matmul(x, wv).unwrap();
        let act = tape.relu(pre);
        let loss = tape.sum(act);
        let g = tape.backward(loss).unwrap().param(ParamId(0), w.shape());
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreached_and_unregistered_params_are_zero() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &Matrix::filled(2, 2, 1.0));
        let _b = tape.param(ParamId(1), &Matrix::filled(2, 2, 1.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(!g.reached(ParamId(1)));
        assert_eq!(g.param(ParamId(1), (2, 2)), Matrix::zeros(2, 2));
        assert_eq!(g.param(ParamId(7), (1, 3)), Matrix::zeros(1, 3));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 1));
        assert!(matches!(tape.backward(a), Err(CvseError::Shape { .. })));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let x = random(3, 3, 9);
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &x);
        let s = tape.row_softmax(v, 2.0).unwrap();
        let n = tape.l2_normalize_rows(s).unwrap();
        let loss = tape.sum(n);
        let g1 = tape.backward(loss).unwrap().param(ParamId(0), x.shape());
        let g2 = tape.backward(loss).unwrap().param(ParamId(0), x.shape());
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let x = random(3, 4, 2);
        let other = random(3, 4, 3);
        check(&x, &|t, v| {
            let o = t.constant(other.clone());
            let a = t.mul(v, o).unwrap();
            let b = t.sigmoid(a);
            let c = t.tanh(v);
            let d = t.sub(b, c).unwrap();
            let e = t.add(d, v).unwrap();
            let f = t.scale(e, 1.7);
            let f = t.add_scalar(f, 0.3);
            let g = t.mul(f, f).unwrap();
            t.sum(g)
        });
    }

    #[test]
    fn matmul_and_transpose_gradcheck() {
        let x = random(3, 4, 4);
        let other = random(5, 4, 5);
        check(&x, &|t, v| {
            let o = t.constant(other.clone());
            let a = t.matmul_t(v, o).unwrap();
            let at = t.transpose(a);
            let b = t.matmul(at, v).unwrap();
            let b2 = t.mul(b, b).unwrap();
            t.sum(b2)
        });
    }

    #[test]
    fn softmax_normalize_gradcheck() {
        let x = random(2, 5, 6);
        let w = random(2, 5, 7);
        check(&x, &|t, v| {
            let s = t.row_softmax(v, 3.0).unwrap();
            let n = t.l2_normalize_rows(v).unwrap();
            let wv = t.constant(w.clone());
            let a = t.mul(s, wv).unwrap();
            let b = t.mul(n, wv).unwrap();
            let c = t.add(a, b).unwrap();
            t.sum(c)
        });
    }

    #[test]
    fn structural_ops_gradcheck() {
        let x = random(4, 3, 8);
        let row = random(1, 3, 10);
        let w = random(3, 3, 11);
        check(&x, &|t, v| {
            let r = t.constant(row.clone());
            let a = t.add_row(v, r).unwrap();
            let g = t.gather_rows(a, &[2, 0, 2]).unwrap();
            let m = t.mean_rows(v).unwrap();
            let s = t.stack_rows(&[g, m]).unwrap();
            let wv = t.constant(w.clone());
            let sq = t.matmul(s, wv).unwrap();
            let d = t.gather_rows(sq, &[0, 1, 2]).unwrap();
            let diag = t.diag(d).unwrap();
            let shifted = t.add_col(d, diag).unwrap();
            let mx = t.row_max(shifted).unwrap();
            let rl = t.relu(shifted);
            let total = t.sum(rl);
            let mxs = t.sum(mx);
            let out = t.add(total, mxs).unwrap();
            let cl = t.clamp_min(out, -1e9);
            let sq = t.mul(cl, cl).unwrap();
            t.sum(sq)
        });
    }

    #[test]
    fn ln_gradcheck_and_error() {
        let x = random(2, 3, 12).map(|v| v.abs() + 0.5);
        check(&x, &|t, v| {
            let l = t.ln(v).unwrap();
            let p = t.mul(l, v).unwrap();
            t.sum(p)
        });
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(1, 1));
        assert!(tape.ln(z).is_err());
    }
}
