//! Batched reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records a forward computation where every value is a matrix
//! whose rows are independent samples. Parameters live in a [`ParamStore`]
//! that the tape borrows immutably; [`Tape::backward`] returns a
//! [`Gradients`] bundle that is then folded into the store.
//!
//! Operations outside the built-in set (the quantum circuit layer and the
//! volume-rendering quadrature) plug in through [`CustomOp`].

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::qsim::EMBED_ZERO_NORM;

pub type Matrix = Array2<f64>;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// MLP weights and circuit angles.
    Main,
    /// Per-channel output scales.
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Every trainable array of a model, with a gradient slot of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.raw_dim());
        self.params.push(Param { name: name.into(), group, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds a gradient bundle into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                p.grad += g;
            }
        }
    }

    /// `name=norm` pairs, used in diagnostics.
    pub fn norms_summary(&self) -> String {
        self.params
            .iter()
            .map(|p| format!("{}={:.4e}", p.name, p.value.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A differentiable operation implemented outside the tape.
///
/// `forward` runs once when the node is recorded and may cache whatever
/// `backward` needs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix>;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad_out: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    MatMulConst { x: NodeId, m: Matrix },
    MulRow { x: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    ClampCols { x: NodeId, lo: Vec<f64>, hi: Vec<f64> },
    ScaleCols { x: NodeId, s: Vec<f64> },
    Concat { a: NodeId, b: NodeId },
    RowKron { a: NodeId, b: NodeId },
    Sum(NodeId),
    Mse { x: NodeId, target: Matrix },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Matrix>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Matrix>>,
    leaves: Vec<(NodeId, Matrix)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf recorded with [`Tape::leaf_with_grad`].
    pub fn leaf(&self, id: NodeId) -> Option<&Matrix> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, g)| g)
    }
}

/// Recorded forward computation.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    frozen: Vec<bool>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], frozen: vec![false; store.len()] }
    }

    /// Treats a parameter as a constant: it receives no gradient and the
    /// work to compute one is skipped. Must be called before the parameter
    /// is first read.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    /// Freezes every parameter except those in `keep`.
    pub fn freeze_all_except(&mut self, keep: &[ParamId]) {
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = !keep.contains(&ParamId(i));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (_, Some(v)) => v,
            (Op::Param(p), None) => self.store.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Input whose gradient is reported in [`Gradients::leaf`].
    pub fn leaf_with_grad(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Node reading a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad: !self.frozen[id.0] });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// `x W + b` with `W: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.nrows() || bv.nrows() != 1 || bv.ncols() != wv.ncols() {
            return invalid(format!(
                "linear shapes: x {:?}, w {:?}, b {:?}",
                xv.dim(),
                wv.dim(),
                bv.dim()
            ));
        }
        let mut y = xv.dot(wv);
        y += bv;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, y, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(Op::Relu(x), y, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), y, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(f64::exp);
        let ng = self.needs(x);
        self.push(Op::Exp(x), y, ng)
    }

    /// Per-row L2 normalization; rows with norm below `1e-12` become the
    /// uniform vector `1/sqrt(cols)` and pass no gradient.
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut y = xv.clone();
        let uniform = (xv.ncols() as f64).sqrt().recip();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in y.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < EMBED_ZERO_NORM {
                row.fill(uniform);
            } else {
                row.mapv_inplace(|v| v / norm);
            }
            norms.push(norm);
        }
        let ng = self.needs(x);
        self.push(Op::NormalizeRows { x, norms }, y, ng)
    }

    /// `x M` for a constant matrix `M`.
    pub fn matmul_const(&mut self, x: NodeId, m: Matrix) -> Result<NodeId> {
        if self.value(x).ncols() != m.nrows() {
            return invalid(format!("matmul_const: {:?} x {:?}", self.value(x).dim(), m.dim()));
        }
        let y = self.value(x).dot(&m);
        let ng = self.needs(x);
        Ok(self.push(Op::MatMulConst { x, m }, y, ng))
    }

    /// Every row of `x` multiplied elementwise by the `1 x cols` node `row`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return invalid(format!("mul_row: {:?} by {:?}", xv.dim(), rv.dim()));
        }
        let y = xv * rv;
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(Op::MulRow { x, row }, y, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).dim() != self.value(b).dim() {
            return invalid("mul: shape mismatch");
        }
        let y = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, y, ng))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let y = self.value(x) * k;
        let ng = self.needs(x);
        self.push(Op::Scale { x, k }, y, ng)
    }

    /// Columnwise clamp to `[lo[j], hi[j]]`. The gradient is passed through
    /// wherever the input lies in the closed interval.
    pub fn clamp_cols(&mut self, x: NodeId, lo: Vec<f64>, hi: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if lo.len() != xv.ncols() || hi.len() != xv.ncols() {
            return invalid("clamp_cols: bound length mismatch");
        }
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(lo[j], hi[j]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::ClampCols { x, lo, hi }, y, ng))
    }

    /// Column `j` multiplied by the constant `s[j]`.
    pub fn scale_cols(&mut self, x: NodeId, s: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if s.len() != xv.ncols() {
            return invalid("scale_cols: length mismatch");
        }
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&s).for_each(|(v, k)| *v *= k);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::ScaleCols { x, s }, y, ng))
    }

    /// Column concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return invalid("concat: row mismatch");
        }
        let y = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b }, y, ng))
    }

    /// Row-wise Kronecker product: `out[r, i * nb + j] = a[r, i] * b[r, j]`.
    pub fn row_kron(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return invalid("row_kron: row mismatch");
        }
        let (na, nb) = (av.ncols(), bv.ncols());
        let mut y = Matrix::zeros((av.nrows(), na * nb));
        Zip::from(y.rows_mut()).and(av.rows()).and(bv.rows()).for_each(|mut out, ar, br| {
            for i in 0..na {
                let ai = ar[i];
                let mut chunk = out.slice_mut(s![i * nb..(i + 1) * nb]);
                chunk.iter_mut().zip(br.iter()).for_each(|(o, bj)| *o = ai * bj);
            }
        });
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::RowKron { a, b }, y, ng))
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let y = Matrix::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(x);
        self.push(Op::Sum(x), y, ng)
    }

    /// Mean squared difference to a constant target, as a `1 x 1` matrix.
    pub fn mse(&mut self, x: NodeId, target: Matrix) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.dim() != target.dim() {
            return invalid(format!("mse: {:?} vs {:?}", xv.dim(), target.dim()));
        }
        let count = xv.len().max(1) as f64;
        let loss = Zip::from(xv).and(&target).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / count;
        let ng = self.needs(x);
        Ok(self.push(Op::Mse { x, target }, Matrix::from_elem((1, 1), loss), ng))
    }

    pub fn custom(&mut self, inputs: &[NodeId], mut op: Box<dyn CustomOp>) -> Result<NodeId> {
        let y = {
            let vals: Vec<&Matrix> = inputs.iter().map(|&i| self.value(i)).collect();
            op.forward(&vals)?
        };
        let ng = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(Op::Custom { inputs: inputs.to_vec(), op }, y, ng))
    }

    /// Smallest distance of any ReLU or clamp input to its kink. Useful for
    /// choosing finite-difference probe points.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x) {
                        margin = margin.min(v.abs());
                    }
                }
                Op::ClampCols { x, lo, hi } => {
                    for row in self.value(*x).rows() {
                        for (j, v) in row.iter().enumerate() {
                            margin = margin.min((v - lo[j]).abs()).min((v - hi[j]).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Side of every ReLU and clamp kink the recorded inputs fall on:
    /// `Relu` gives 0 or 1, a clamp gives 0 (below), 1 (inside) or 2 (above).
    /// Two tapes with equal patterns follow the same linear piece.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).iter().map(|&v| u8::from(v > 0.0))),
                Op::ClampCols { x, lo, hi } => {
                    for row in self.value(*x).rows() {
                        out.extend(row.iter().enumerate().map(|(j, &v)| if v < lo[j] { 0 } else if v > hi[j] { 2 } else { 1 }));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from the scalar node `loss`, seeded with `d loss = 1`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::InvalidState(format!(
                "backward from node {} but the tape holds {} nodes",
                loss.0,
                self.nodes.len()
            )));
        };
        if root.value.as_ref().map(|v| v.dim()) != Some((1, 1)) {
            return Err(Error::InvalidState("backward needs a recorded scalar loss node".into()));
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients { params: vec![None; self.store.len()], leaves: Vec::new() };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: NodeId, delta: Matrix| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => out.leaves.push((NodeId(idx), g)),
                Op::Param(p) => out.params[p.0] = Some(g),
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        send(*x, g.dot(&self.value(*w).t()));
                    }
                    if self.needs(*w) {
                        send(*w, self.value(*x).t().dot(&g));
                    }
                    if self.needs(*b) {
                        send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    send(*x, d);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(NodeId(idx));
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                    send(*x, d);
                }
                Op::Exp(x) => {
                    let mut d = g;
                    d *= self.value(NodeId(idx));
                    send(*x, d);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = self.value(NodeId(idx));
                    let mut d = g;
                    for ((mut drow, yrow), &norm) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        if norm < EMBED_ZERO_NORM {
                            drow.fill(0.0);
                            continue;
                        }
                        let proj = drow.dot(&yrow);
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = (*dv - yv * proj) / norm);
                    }
                    send(*x, d);
                }
                Op::MatMulConst { x, m } => send(*x, g.dot(&m.t())),
                Op::MulRow { x, row } => {
                    if self.needs(*row) {
                        let prod = &g * self.value(*x);
                        send(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        send(*x, &g * self.value(*row));
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::Scale { x, k } => send(*x, g * *k),
                Op::ClampCols { x, lo, hi } => {
                    let mut d = g;
                    for (mut drow, xrow) in d.rows_mut().into_iter().zip(self.value(*x).rows()) {
                        for (j, (dv, &v)) in drow.iter_mut().zip(xrow.iter()).enumerate() {
                            if v < lo[j] || v > hi[j] {
                                *dv = 0.0;
                            }
                        }
                    }
                    send(*x, d);
                }
                Op::ScaleCols { x, s } => {
                    let mut d = g;
                    for mut row in d.rows_mut() {
                        row.iter_mut().zip(s).for_each(|(v, k)| *v *= k);
                    }
                    send(*x, d);
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).ncols();
                    send(*a, g.slice(s![.., ..na]).to_owned());
                    send(*b, g.slice(s![.., na..]).to_owned());
                }
                Op::RowKron { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (na, nb) = (av.ncols(), bv.ncols());
                    let mut da = Matrix::zeros(av.raw_dim());
                    let mut db = Matrix::zeros(bv.raw_dim());
                    for r in 0..g.nrows() {
                        for i in 0..na {
                            let gi = g.slice(s![r, i * nb..(i + 1) * nb]);
                            da[[r, i]] = gi.dot(&bv.row(r));
                            let ai = av[[r, i]];
                            db.row_mut(r).scaled_add(ai, &gi);
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Sum(x) => {
                    let k = g[[0, 0]];
                    send(*x, Matrix::from_elem(self.value(*x).raw_dim(), k));
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let k = 2.0 * g[[0, 0]] / xv.len().max(1) as f64;
                    let mut d = xv - target;
                    d *= k;
                    send(*x, d);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|&i| self.value(i)).collect();
                    let deltas = op.backward(&vals, self.value(NodeId(idx)), &g);
                    debug_assert_eq!(deltas.len(), inputs.len(), "{} returned wrong arity", op.name());
                    for (&i, d) in inputs.iter().zip(deltas) {
                        send(i, d);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Activation applied after the last affine layer of an [`Mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Relu,
}

/// Fully connected network: ReLU between layers, optional ReLU at the end.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    output: OutputActivation,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return invalid(format!("mlp {name}: bad layer dims {dims:?}"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (fan_in as f64).sqrt().recip();
            let w = Matrix::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
            let b = Matrix::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..=bound));
            let wid = store.add(format!("{name}.{k}.weight"), ParamGroup::Main, w);
            let bid = store.add(format!("{name}.{k}.bias"), ParamGroup::Main, b);
            layers.push((wid, bid));
        }
        Ok(Self { layers, output, dims: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Closed-form parameter count for the given layer dims.
    pub fn count_for(dims: &[usize]) -> usize {
        dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        Self::count_for(&self.dims)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (wn, bn) = (tape.param(w), tape.param(b));
            h = tape.linear(h, wn, bn)?;
            if k < last || self.output == OutputActivation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Forward pass of an MLP on a single input vector, without keeping a tape.
pub fn forward_mlp(store: &ParamStore, mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.leaf(Matrix::from_shape_vec((1, input.len()), input.to_vec()).expect("row shape"));
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).iter().copied().collect())
}
