//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::matrix::{self, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    Gather { x: NodeId, cells: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if the loss depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when the
    /// loss does not depend on `id`.
    pub fn get_or_zeros(&self, id: NodeId, like: &Matrix) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool, name: &str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: gradients flow to it.
    pub fn param(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Leaf, value, true, "param")
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matrix::affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.grad_any(&[x, w, b]);
        self.push(Op::Affine { x, w, b }, value, rg, "affine")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        self.push(Op::MatMulT(a, b), value, rg, "matmul_t")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        self.push(Op::Add(a, b), value, rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        self.push(Op::Sub(a, b), value, rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        self.push(Op::Mul(a, b), value, rg, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).scale(c);
        let rg = self.grad_any(&[a]);
        self.push(Op::Scale(a, c), value, rg, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v + c);
        let rg = self.grad_any(&[a]);
        self.push(Op::AddScalar(a), value, rg, "add_scalar")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = matrix::relu(self.value(a));
        let rg = self.grad_any(&[a]);
        self.push(Op::Relu(a), value, rg, "relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(f64::exp);
        let rg = self.grad_any(&[a]);
        self.push(Op::Exp(a), value, rg, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Numeric(format!("log of non-positive value {v}")));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.grad_any(&[a]);
        self.push(Op::Log(a), value, rg, "log")
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| 1.0 / v);
        let rg = self.grad_any(&[a]);
        self.push(Op::Recip(a), value, rg, "recip")
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.grad_any(&[a]);
        self.push(Op::Sum(a), value, rg, "sum")
    }

    /// Frobenius inner product of two same-shaped nodes, as `1 x 1`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_shape(vb, "dot")?;
        let value = Matrix::scalar(matrix::dot(va.data(), vb.data()));
        let rg = self.grad_any(&[a, b]);
        self.push(Op::Dot(a, b), value, rg, "dot")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.value(x).slice_cols(start, end)?;
        let rg = self.grad_any(&[x]);
        self.push(Op::SliceCols { x, start }, value, rg, "slice_cols")
    }

    /// Picks the listed `(row, col)` cells into an `n x 1` column.
    pub fn gather(&mut self, x: NodeId, cells: Vec<(usize, usize)>) -> Result<NodeId> {
        let src = self.value(x);
        let mut data = Vec::with_capacity(cells.len());
        for &(r, c) in &cells {
            if r >= src.rows() || c >= src.cols() {
                return Err(Error::dim("gather", src.shape_str(), format!("cell ({r}, {c})")));
            }
            data.push(src.get(r, c));
        }
        let value = Matrix::new(cells.len(), 1, data)?;
        let rg = self.grad_any(&[x]);
        self.push(Op::Gather { x, cells }, value, rg, "gather")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss node, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                if self.needs(*x) {
                    let dx = g.matmul_t(self.value(*w))?;
                    accumulate(adj, *x, dx);
                }
                if self.needs(*w) {
                    let dw = self.value(*x).t_matmul(g)?;
                    accumulate(adj, *w, dw);
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.sum_rows());
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.needs(*a) {
                    accumulate(adj, *a, g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.hadamard(self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.scale(*c)),
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Relu(a) => {
                // subgradient at exactly 0 is 0
                let d = g.zip_map(self.value(*a), "relu'", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, g.hadamard(out)?),
            Op::Log(a) => {
                let d = g.zip_map(self.value(*a), "log'", |gv, x| gv / x)?;
                accumulate(adj, *a, d);
            }
            Op::Recip(a) => {
                let d = g.zip_map(out, "recip'", |gv, y| -gv * y * y)?;
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let v = self.value(*a);
                accumulate(adj, *a, Matrix::filled(v.rows(), v.cols(), g.get(0, 0)));
            }
            Op::Dot(a, b) => {
                let s = g.get(0, 0);
                if self.needs(*a) {
                    accumulate(adj, *a, self.value(*b).scale(s));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, self.value(*a).scale(s));
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(adj, *x, d);
            }
            Op::Gather { x, cells } => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (i, &(r, c)) in cells.iter().enumerate() {
                    let cur = d.get(r, c);
                    d.set(r, c, cur + g.get(i, 0));
                }
                accumulate(adj, *x, d);
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
