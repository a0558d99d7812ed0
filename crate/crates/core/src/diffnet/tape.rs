//! Matrix-valued reverse-accumulation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order. Each node caches its forward value; `backward` walks the
//! list in reverse and accumulates adjoints into a flat gradient aligned with
//! the [`ParameterStore`](super::ParameterStore) layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Data fed in from outside; no gradient.
    Input,
    /// A constant; no gradient.
    Constant,
    /// Stop-gradient pseudo-inverse of `source`'s forward value. Carries no
    /// gradient to `source` or anywhere else.
    FrozenPinv { source: NodeId, rel_tol: f64 },
    /// A view of θ starting at `offset`, shaped like the node value.
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    /// Adds a 1×n row vector to every row.
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    NormalizeRows(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    /// m×n → m×1 row-wise log-sum-exp.
    RowLogSumExp(NodeId),
    /// n×n → n×1 diagonal.
    Diag(NodeId),
    /// Sum of all entries → 1×1.
    Sum(NodeId),
    /// Differentiable pseudo-inverse. Only used to contrast against the
    /// frozen variant; training never records it.
    Pinv(NodeId, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::FrozenPinv { .. } => "frozen_pinv",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::RowLogSumExp(_) => "row_log_sum_exp",
            Op::Diag(_) => "diag",
            Op::Sum(_) => "sum",
            Op::Pinv(..) => "pinv",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// The computation record.
#[derive(Debug, Clone, Default)]
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, theta: &[f64], offset: usize, rows: usize, cols: usize) -> NodeId {
        let value = Matrix::from_raw(rows, cols, theta[offset..offset + rows * cols].to_vec());
        self.push(Op::Param { offset }, value)
    }

    /// Pseudo-inverse of `source`'s current value, recorded as a constant.
    pub fn frozen_pinv(&mut self, source: NodeId, rel_tol: f64) -> Result<NodeId> {
        let value = linalg::pinv(self.value(source), rel_tol)?;
        Ok(self.push(Op::FrozenPinv { source, rel_tol }, value))
    }

    fn apply(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMulNT(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::NormalizeRows(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.apply(Op::Scale(a, k))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square(a))
    }

    pub fn row_log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::RowLogSumExp(a))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Diag(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(a))
    }

    pub fn pinv_differentiable(&mut self, a: NodeId, rel_tol: f64) -> Result<NodeId> {
        self.apply(Op::Pinv(a, rel_tol))
    }

    /// Forward evaluation of a non-leaf op from the values currently cached
    /// on its operands.
    fn eval(&self, op: &Op) -> Result<Matrix> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Input | Op::Constant | Op::Param { .. } => {
                return Err(Error::contract("Tape::eval", "leaf nodes carry their own value"))
            }
            Op::FrozenPinv { source, rel_tol } => linalg::pinv(v(source), *rel_tol)?,
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::MatMulNT(a, b) => v(a).matmul_nt(v(b))?,
            Op::AddRow(a, r) => {
                let (a, r) = (v(a), v(r));
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(Error::shape("add_row", alloc::format!("{:?} + {:?}", a.shape(), r.shape())));
                }
                let mut out = a.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Tanh(a) => v(a).map(libm::tanh),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::NormalizeRows(a) => v(a).normalize_rows().map_err(|row| Error::DegenerateEmbedding {
                modality: alloc::string::String::from("?"),
                row,
            })?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Scale(a, k) => v(a).scale(*k),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::RowLogSumExp(a) => {
                let a = v(a);
                if a.cols() == 0 {
                    return Err(Error::contract("row_log_sum_exp", "rows are empty"));
                }
                Matrix::from_fn(a.rows(), 1, |i, _| linalg::log_sum_exp_nonempty(a.row(i)))
            }
            Op::Diag(a) => {
                let a = v(a);
                if a.rows() != a.cols() {
                    return Err(Error::shape("diag", alloc::format!("{:?} is not square", a.shape())));
                }
                Matrix::from_fn(a.rows(), 1, |i, _| a[(i, i)])
            }
            Op::Sum(a) => Matrix::from_raw(1, 1, vec![v(a).data().iter().sum()]),
            Op::Pinv(a, tol) => linalg::pinv(v(a), *tol)?,
        })
    }

    /// Recomputes every non-leaf node from the recorded leaves and returns
    /// the value of `out`. Must reproduce the recorded value bitwise.
    pub fn replay(&self, out: NodeId) -> Result<Matrix> {
        let mut fresh = Tape { nodes: Vec::with_capacity(self.nodes.len()) };
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Constant | Op::Param { .. } => node.value.clone(),
                ref op => fresh.eval(op)?,
            };
            fresh.nodes.push(Node { op: node.op.clone(), value });
        }
        Ok(fresh.nodes[out.0].value.clone())
    }

    /// Gradient of the 1×1 node `loss` with respect to θ, as a vector of
    /// length `param_len`.
    pub fn backward(&self, loss: NodeId, param_len: usize) -> Result<Vec<f64>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract("backward", alloc::format!("loss node has shape {:?}", lv.shape())));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::numerical("backward", "loss value is not finite"));
        }
        let mut grad = vec![0.0; param_len];
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.is_finite() {
                return Err(Error::numerical(
                    "backward",
                    alloc::format!("non-finite adjoint at node {idx} ({})", node.op.name()),
                ));
            }
            let v = |id: &NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Input | Op::Constant | Op::FrozenPinv { .. } => {}
                Op::Param { offset } => {
                    let dst = &mut grad[*offset..*offset + g.data().len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt_unchecked(v(b));
                    let db = v(a).matmul_tn_unchecked(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul_unchecked(v(b));
                    let db = g.matmul_tn_unchecked(v(a));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(a, r) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (d, s) in dr.data_mut().iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *r, dr);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Matrix::from_raw(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
                Op::Relu(a) => {
                    let x = v(a);
                    let da = Matrix::from_raw(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(x.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
                Op::NormalizeRows(a) => {
                    let x = v(a);
                    let y = &node.value;
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let norm = libm::sqrt(linalg::dot(x.row(i), x.row(i)));
                        let yg = linalg::dot(y.row(i), g.row(i));
                        for ((d, gy), yy) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *d = (gy - yy * yg) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.scale(*k)),
                Op::Square(a) => {
                    let x = v(a);
                    let da = Matrix::from_raw(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(x.data()).map(|(g, x)| 2.0 * g * x).collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
                Op::RowLogSumExp(a) => {
                    let x = v(a);
                    let y = &node.value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let (gi, yi) = (g[(i, 0)], y[(i, 0)]);
                        for (d, xv) in da.row_mut(i).iter_mut().zip(x.row(i)) {
                            *d = gi * libm::exp(xv - yi);
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Diag(a) => {
                    let n = g.rows();
                    let mut da = Matrix::zeros(n, n);
                    for i in 0..n {
                        da[(i, i)] = g[(i, 0)];
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = v(a).shape();
                    accumulate(&mut adj, *a, Matrix::from_raw(r, c, vec![g[(0, 0)]; r * c]));
                }
                Op::Pinv(a, _) => {
                    let da = pinv_adjoint(v(a), &node.value, &g);
                    accumulate(&mut adj, *a, da);
                }
            }
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical("backward", alloc::format!("non-finite gradient at θ[{pos}]")));
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adjoint of `P = A⁺` for constant-rank `A`:
/// `−Pᵀ G Pᵀ + (I − A P) Gᵀ P Pᵀ + Pᵀ P Gᵀ (I − P A)`.
fn pinv_adjoint(a: &Matrix, p: &Matrix, g: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let pt = p.transpose();
    let gt = g.transpose();
    let term1 = pt.matmul_unchecked(g).matmul_unchecked(&pt).scale(-1.0);
    let i_ap = Matrix::identity(m).sub(&a.matmul_unchecked(p)).expect("square");
    let i_pa = Matrix::identity(n).sub(&p.matmul_unchecked(a)).expect("square");
    let term2 = i_ap.matmul_unchecked(&gt).matmul_unchecked(&p.matmul_unchecked(&pt));
    let term3 = pt.matmul_unchecked(p).matmul_unchecked(&gt).matmul_unchecked(&i_pa);
    term1.add(&term2).and_then(|t| t.add(&term3)).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` over every coordinate of `theta`.
    fn numeric_grad(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                let orig = t[i];
                t[i] = orig + h;
                let up = f(&t);
                t[i] = orig - h;
                let dn = f(&t);
                t[i] = orig;
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(an: &[f64], num: &[f64], tol: f64) {
        for (i, (a, n)) in an.iter().zip(num).enumerate() {
            let rel = (a - n).abs() / (n.abs() + 1e-8);
            assert!(rel < tol, "coord {i}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let theta = [1.0, 2.0];
        let _p = t.param(&theta, 0, 1, 2);
        let c = t.constant(Matrix::from_raw(1, 1, vec![5.0]));
        let g = t.backward(c, 2).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_theta() {
        let theta = [0.5, -1.5, 2.0];
        let mut t = Tape::new();
        let p = t.param(&theta, 0, 1, 3);
        let sq = t.square(p).unwrap();
        let s = t.sum(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        assert_eq!(t.backward(l, 3).unwrap(), theta.to_vec());
    }

    fn mlp_loss(theta: &[f64], x: &Matrix, record: bool) -> (f64, Option<Vec<f64>>) {
        // 4x3 input -> 3x5 weight + bias -> tanh -> normalize -> a·aᵀ -> lse rows -> diag-mix -> sum
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let w = t.param(theta, 0, 3, 5);
        let b = t.param(theta, 15, 1, 5);
        let h = t.matmul(xi, w).unwrap();
        let h = t.add_row(h, b).unwrap();
        let h = t.tanh(h).unwrap();
        let r = t.relu(h).unwrap();
        let h = t.add(h, r).unwrap();
        let n = t.normalize_rows(h).unwrap();
        let s = t.matmul_nt(n, n).unwrap();
        let s = t.scale(s, 3.0).unwrap();
        let l = t.row_log_sum_exp(s).unwrap();
        let d = t.diag(s).unwrap();
        let diff = t.sub(l, d).unwrap();
        let sq = t.square(diff).unwrap();
        let out = t.sum(sq).unwrap();
        let g = record.then(|| t.backward(out, theta.len()).unwrap());
        (t.scalar(out), g)
    }

    #[test]
    fn composite_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = random(1, 20, &mut rng);
        let x = Matrix::from_raw(4, 3, random(4, 3, &mut rng));
        let (_, g) = mlp_loss(&theta, &x, true);
        let num = numeric_grad(&theta, 1e-6, |t| mlp_loss(t, &x, false).0);
        assert_close(&g.unwrap(), &num, 1e-6);
    }

    #[test]
    fn replay_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random(1, 12, &mut rng);
        let mut t = Tape::new();
        let x = t.input(Matrix::from_raw(3, 4, random(3, 4, &mut rng)));
        let w = t.param(&theta, 0, 4, 3);
        let h = t.matmul(x, w).unwrap();
        let n = t.normalize_rows(h).unwrap();
        let p = t.frozen_pinv(n, 1e-12).unwrap();
        let q = t.matmul(p, n).unwrap();
        let s = t.sum(q).unwrap();
        let replayed = t.replay(s).unwrap();
        assert_eq!(replayed.data()[0].to_bits(), t.scalar(s).to_bits());
    }

    #[test]
    fn frozen_pinv_blocks_gradient_but_differentiable_one_does_not() {
        // loss = sum(P ⊙ P) where P = pinv(W); frozen => zero gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = random(1, 12, &mut rng);
        let build = |theta: &[f64], frozen: bool| {
            let mut t = Tape::new();
            let w = t.param(theta, 0, 3, 4);
            let p = if frozen { t.frozen_pinv(w, 1e-12).unwrap() } else { t.pinv_differentiable(w, 1e-12).unwrap() };
            let sq = t.square(p).unwrap();
            let s = t.sum(sq).unwrap();
            (t.scalar(s), t.backward(s, 12).unwrap())
        };
        let (_, frozen) = build(&theta, true);
        assert!(frozen.iter().all(|&g| g == 0.0));
        let (_, live) = build(&theta, false);
        let num = numeric_grad(&theta, 1e-6, |t| build(t, false).0);
        assert_close(&live, &num, 1e-5);
    }

    #[test]
    fn pinv_adjoint_tall_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = random(1, 15, &mut rng);
        let weights = Matrix::from_raw(3, 5, random(3, 5, &mut rng));
        let f = |theta: &[f64], record: bool| {
            let mut t = Tape::new();
            let a = t.param(theta, 0, 5, 3);
            let p = t.pinv_differentiable(a, 1e-12).unwrap();
            let c = t.constant(weights.clone());
            let d = t.sub(p, c).unwrap();
            let sq = t.square(d).unwrap();
            let s = t.sum(sq).unwrap();
            (t.scalar(s), record.then(|| t.backward(s, 15).unwrap()))
        };
        let g = f(&theta, true).1.unwrap();
        let num = numeric_grad(&theta, 1e-6, |t| f(t, false).0);
        assert_close(&g, &num, 1e-5);
    }

    #[test]
    fn nan_during_backward_names_the_primitive() {
        let mut t = Tape::new();
        let theta = [f64::MAX, 1.0];
        let p = t.param(&theta, 0, 1, 2);
        let sq = t.square(p).unwrap(); // overflows to inf
        let z = t.scale(sq, 0.0).unwrap(); // inf * 0 = NaN value, but adjoint stays finite
        let s = t.sum(z).unwrap();
        let err = t.backward(s, 2).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err:?}");
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(2, 2));
        assert!(t.backward(x, 0).is_err());
    }
}
