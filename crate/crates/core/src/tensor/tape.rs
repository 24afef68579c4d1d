//! Graph-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended to a [`Tape`] in evaluation order, so the node list is
//! already a topological order. [`Tape::backward`] walks it once in reverse.
//! Leaves are either parameters (gradients are accumulated) or constants
//! (frozen inputs such as `x` and `W0`; gradient work is skipped for them and
//! for anything computed only from them).

use super::matrix::{matmul_into, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    Outer(Var, Var),
    /// `u (n x q)` with each row `i` multiplied by `c[i]` where `c` is `n x 1`.
    MulColumn(Var, Var),
    SliceCols { src: Var, start: usize },
    Sum(Var),
}

#[derive(Debug, Clone)]
pub struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let s = super::matrix::softmax_row(src.row(i));
            for (j, v) in s.into_iter().enumerate() {
                value.set(i, j, v);
            }
        }
        let rg = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Outer product of two column vectors `u (p x 1)`, `v (q x 1)`.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uu, vv) = (self.value(u), self.value(v));
        if uu.cols() != 1 || vv.cols() != 1 {
            return Err(Error::Shape {
                op: "outer",
                lhs: uu.shape(),
                rhs: vv.shape(),
            });
        }
        let value = super::matrix::outer(uu.data(), vv.data())?;
        let rg = self.needs(&[u, v]);
        Ok(self.push(value, Op::Outer(u, v), rg))
    }

    /// Scales row `i` of `u` by `c[i]`; `c` must be `rows(u) x 1`.
    pub fn mul_column(&mut self, u: Var, c: Var) -> Result<Var> {
        let (uu, cc) = (self.value(u), self.value(c));
        if cc.cols() != 1 || cc.rows() != uu.rows() {
            return Err(Error::Shape {
                op: "mul_column",
                lhs: uu.shape(),
                rhs: cc.shape(),
            });
        }
        let mut value = uu.clone();
        let q = uu.cols();
        for (i, row) in value.data_mut().chunks_mut(q).enumerate() {
            let ci = cc.get(i, 0);
            row.iter_mut().for_each(|v| *v *= ci);
        }
        let rg = self.needs(&[u, c]);
        Ok(self.push(value, Op::MulColumn(u, c), rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(src).slice_cols(start, len)?;
        let rg = self.needs(&[src]);
        Ok(self.push(value, Op::SliceCols { src, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean squared error against a target as a `1 x 1` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.hadamard(diff, diff)?;
        let total = self.sum(sq);
        let n = self.value(pred).len() as f64;
        Ok(self.scale(total, 1.0 / n))
    }

    /// Accumulates `d output / d node` into every node that requires a
    /// gradient. Calling twice accumulates twice.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let (rows, cols) = self.value(output).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalar { rows, cols });
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.nodes[output.0].grad.data_mut()[0] += 1.0;

        for idx in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            propagate(before, node);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().fill(0.0);
        }
    }
}

/// Pushes `node.grad` into its parents, all of which live in `before`.
fn propagate(before: &mut [Node], node: &Node) {
    let g = &node.grad;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if before[a.0].requires_grad {
                let bt = before[b.0].value.transpose();
                let mut ga = Matrix::zeros(g.rows(), bt.cols());
                matmul_into(g, &bt, &mut ga);
                before[a.0].grad.add_assign(&ga);
            }
            if before[b.0].requires_grad {
                let at = before[a.0].value.transpose();
                let mut gb = Matrix::zeros(at.rows(), g.cols());
                matmul_into(&at, g, &mut gb);
                before[b.0].grad.add_assign(&gb);
            }
        }
        Op::Add(a, b) => {
            if before[a.0].requires_grad {
                before[a.0].grad.add_assign(g);
            }
            if before[b.0].requires_grad {
                before[b.0].grad.add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if before[a.0].requires_grad {
                before[a.0].grad.add_assign(g);
            }
            if before[b.0].requires_grad {
                before[b.0].grad.add_assign(&g.scale(-1.0));
            }
        }
        Op::Hadamard(a, b) => {
            if a == b {
                if before[a.0].requires_grad {
                    let d = g.hadamard(&before[a.0].value).expect("shape").scale(2.0);
                    before[a.0].grad.add_assign(&d);
                }
                return;
            }
            if before[a.0].requires_grad {
                let d = g.hadamard(&before[b.0].value).expect("shape");
                before[a.0].grad.add_assign(&d);
            }
            if before[b.0].requires_grad {
                let d = g.hadamard(&before[a.0].value).expect("shape");
                before[b.0].grad.add_assign(&d);
            }
        }
        Op::Scale(a, c) => {
            before[a.0].grad.add_assign(&g.scale(c));
        }
        Op::Transpose(a) => {
            before[a.0].grad.add_assign(&g.transpose());
        }
        Op::SoftmaxRows(a) => {
            let s = &node.value;
            let q = s.cols();
            let mut d = Matrix::zeros(s.rows(), q);
            for i in 0..s.rows() {
                let (si, gi) = (s.row(i), g.row(i));
                let dot: f64 = si.iter().zip(gi).map(|(x, y)| x * y).sum();
                for j in 0..q {
                    d.set(i, j, si[j] * (gi[j] - dot));
                }
            }
            before[a.0].grad.add_assign(&d);
        }
        Op::Outer(u, v) => {
            // d/du = G v, d/dv = G^T u
            if before[u.0].requires_grad {
                let d = g.matmul(&before[v.0].value).expect("shape");
                before[u.0].grad.add_assign(&d);
            }
            if before[v.0].requires_grad {
                let d = g.transpose().matmul(&before[u.0].value).expect("shape");
                before[v.0].grad.add_assign(&d);
            }
        }
        Op::MulColumn(u, c) => {
            let q = g.cols();
            if before[u.0].requires_grad {
                let cv = before[c.0].value.clone();
                let mut d = g.clone();
                for (i, row) in d.data_mut().chunks_mut(q).enumerate() {
                    let ci = cv.get(i, 0);
                    row.iter_mut().for_each(|v| *v *= ci);
                }
                before[u.0].grad.add_assign(&d);
            }
            if before[c.0].requires_grad {
                let uv = &before[u.0].value;
                let mut d = Matrix::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    let s: f64 = g.row(i).iter().zip(uv.row(i)).map(|(x, y)| x * y).sum();
                    d.set(i, 0, s);
                }
                before[c.0].grad.add_assign(&d);
            }
        }
        Op::SliceCols { src, start } => {
            let dst = &mut before[src.0].grad;
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let cur = dst.get(i, start + j);
                    dst.set(i, start + j, cur + g.get(i, j));
                }
            }
        }
        Op::Sum(a) => {
            let s = g.get(0, 0);
            for v in before[a.0].grad.data_mut() {
                *v += s;
            }
        }
    }
}
