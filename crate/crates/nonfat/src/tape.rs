//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Training needs gradients of the stochastic ELBO with respect to every
//! parameter. The ELBO composes matrix operations (kernel Grams, Cholesky
//! factors, triangular solves, reparameterized samples), so the tape records
//! matrix-level nodes rather than scalars: each node stores its value and
//! the identities of its inputs, and `backward` replays the records in
//! reverse, applying each operation's vector-Jacobian product.
//!
//! The graph is rebuilt for every evaluation (values are computed eagerly as
//! nodes are created), which keeps the recording logic trivial and lets
//! control flow — batch indices, jitter escalation — depend on concrete
//! values.
//!
//! Scalars live as 1×1 matrices; column vectors as n×1. Elementwise binary
//! operations broadcast like NumPy (each axis must match or be 1), and the
//! backward pass reduce-sums gradients over broadcast axes.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Trainable input.
    Leaf,
    /// Non-trainable input.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product with broadcasting.
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Lower Cholesky factor of a symmetric positive-definite input.
    Cholesky(NodeId),
    /// `(l, b) → L⁻¹B` by forward substitution.
    SolveLower(NodeId, NodeId),
    /// `(l, b) → L⁻ᵀB` by back substitution.
    SolveLowerT(NodeId, NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// Adds a constant to the diagonal of a square input.
    AddDiag(NodeId),
    /// Elementwise `max(x, t)`; gradient passes only where `x > t`.
    ClampMin(NodeId, f64),
    /// Row sums: n×m → n×1.
    RowSums(NodeId),
    /// Column sums: n×m → 1×m.
    ColSums(NodeId),
    /// Sum of all entries: 1×1.
    SumAll(NodeId),
    /// Sum of the diagonal: 1×1.
    SumDiag(NodeId),
    /// Sum of the log of the (positive) diagonal: 1×1.
    SumLogDiag(NodeId),
    /// Maps a raw square matrix to a lower-triangular factor: strict lower
    /// part copied, diagonal exponentiated, upper part dropped. Keeps
    /// Cholesky parameters unconstrained.
    LowerWithExpDiag(NodeId),
    /// Picks rows of the input (duplicates allowed); the backward pass
    /// scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// Joins inputs side by side; all must share the row count.
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Broadcast-compatible output shape for elementwise binaries.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, axis: &str| -> usize {
        if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            panic!("cannot broadcast {axis} sizes {x} and {y}");
        }
    };
    (dim(a.0, b.0, "row"), dim(a.1, b.1, "column"))
}

fn bcast_apply(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("row/column broadcast");
    let bv = b.broadcast(shape).expect("row/column broadcast");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums `g` over any axis along which the target shape is 1.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.to_owned();
    if shape.0 == 1 && out.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

/// `Φ(X)`: lower triangle of `X` with the diagonal halved (Cholesky
/// pullback helper).
fn phi(mut x: Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    for i in 0..n {
        x[[i, i]] *= 0.5;
        for j in (i + 1)..n {
            x[[i, j]] = 0.0;
        }
    }
    x
}

/// A recorded computation: values are produced eagerly, gradients on demand
/// by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every node, in creation order.
    pub fn node_shapes(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().map(|n| n.value.dim()).collect()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not scalar");
        v[[0, 0]]
    }

    /// Gradient of the last backward root with respect to `id`, if the node
    /// participates in the differentiated subgraph.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// 1×1 constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_apply(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_apply(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast_apply(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul shape mismatch: {:?} × {:?}",
            av.dim(),
            bv.dim()
        );
        let v = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), v, rg)
    }

    /// Lower Cholesky factor; fails if the input is not positive definite.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        assert_eq!(av.nrows(), av.ncols(), "cholesky needs a square input");
        let l = linalg::cholesky(&av.view()).ok_or_else(|| {
            Error::Numerical("matrix is not positive definite".to_string())
        })?;
        let rg = self.rg(a);
        Ok(self.push(Op::Cholesky(a), l, rg))
    }

    /// Adds jitter to the diagonal, escalating by factors of 10 (at most 6
    /// attempts) until the Cholesky factorization succeeds; returns the
    /// factor node and the jitter used.
    pub fn chol_jitter(&mut self, a: NodeId, base_jitter: f64) -> Result<(NodeId, f64)> {
        assert!(
            base_jitter > 0.0 && base_jitter.is_finite(),
            "base jitter must be positive and finite"
        );
        let n = self.value(a).nrows();
        let mut jitter = base_jitter;
        for _ in 0..6 {
            let mut shifted = self.value(a).to_owned();
            for i in 0..n {
                shifted[[i, i]] += jitter;
            }
            if linalg::cholesky(&shifted.view()).is_some() {
                let with_diag = self.add_diag(a, jitter);
                let l = self.cholesky(with_diag)?;
                return Ok((l, jitter));
            }
            jitter *= 10.0;
        }
        Err(Error::Numerical(format!(
            "matrix stayed indefinite after jitter escalation to {:.3e}",
            jitter / 10.0
        )))
    }

    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let v = linalg::solve_lower(&self.value(l).view(), &self.value(b).view());
        let rg = self.rg(l) || self.rg(b);
        self.push(Op::SolveLower(l, b), v, rg)
    }

    pub fn solve_lower_t(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let v = linalg::solve_lower_t(&self.value(l).view(), &self.value(b).view());
        let rg = self.rg(l) || self.rg(b);
        self.push(Op::SolveLowerT(l, b), v, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| c * x);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::AddConst(a), v, rg)
    }

    pub fn add_diag(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), av.ncols(), "add_diag needs a square input");
        let mut v = av.to_owned();
        for i in 0..v.nrows() {
            v[[i, i]] += c;
        }
        let rg = self.rg(a);
        self.push(Op::AddDiag(a), v, rg)
    }

    pub fn clamp_min(&mut self, a: NodeId, t: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(t));
        let rg = self.rg(a);
        self.push(Op::ClampMin(a, t), v, rg)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(Op::RowSums(a), v, rg)
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(Op::ColSums(a), v, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::SumAll(a), v, rg)
    }

    pub fn sum_diag(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), av.ncols(), "sum_diag needs a square input");
        let v = Array2::from_elem((1, 1), av.diag().sum());
        let rg = self.rg(a);
        self.push(Op::SumDiag(a), v, rg)
    }

    pub fn sum_log_diag(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), av.ncols(), "sum_log_diag needs a square input");
        let mut acc = 0.0;
        for (i, &d) in av.diag().iter().enumerate() {
            assert!(d > 0.0, "sum_log_diag: diagonal entry {i} is {d}");
            acc += d.ln();
        }
        let rg = self.rg(a);
        self.push(Op::SumLogDiag(a), Array2::from_elem((1, 1), acc), rg)
    }

    pub fn lower_with_exp_diag(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), av.ncols(), "lower_with_exp_diag needs a square input");
        let n = av.nrows();
        let mut v = Array2::zeros((n, n));
        for i in 0..n {
            v[[i, i]] = av[[i, i]].exp();
            for j in 0..i {
                v[[i, j]] = av[[i, j]];
            }
        }
        let rg = self.rg(a);
        self.push(Op::LowerWithExpDiag(a), v, rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut v = Array2::zeros((indices.len(), av.ncols()));
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < av.nrows(), "gather_rows: index {idx} out of range");
            v.row_mut(r).assign(&av.row(idx));
        }
        let rg = self.rg(a);
        self.push(Op::GatherRows(a, indices.to_vec()), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), n, "concat_cols: row counts differ");
            v.slice_mut(s![.., off..off + pv.ncols()]).assign(pv);
            off += pv.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    fn accum(&mut self, id: NodeId, contribution: Array2<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Accumulates gradients of the 1×1 `root` into every contributing node.
    /// Resets previous gradients; the graph itself is untouched, so further
    /// nodes may still be appended afterwards.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return;
        }
        self.grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let ga = reduce_to(&g, self.value(a).dim());
                    self.accum(a, ga);
                    let gb = reduce_to(&g, self.value(b).dim());
                    self.accum(b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(&g, self.value(a).dim());
                    self.accum(a, ga);
                    let gb = reduce_to(&g.mapv(|x| -x), self.value(b).dim());
                    self.accum(b, gb);
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let av = self.value(a).broadcast(shape).expect("broadcast").to_owned();
                    let bv = self.value(b).broadcast(shape).expect("broadcast").to_owned();
                    let ga = reduce_to(&(&g * &bv), self.value(a).dim());
                    self.accum(a, ga);
                    let gb = reduce_to(&(&g * &av), self.value(b).dim());
                    self.accum(b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(b).t());
                    self.accum(a, ga);
                    let gb = self.value(a).t().dot(&g);
                    self.accum(b, gb);
                }
                Op::Transpose(a) => {
                    self.accum(a, g.t().to_owned());
                }
                Op::Cholesky(a) => {
                    // Pullback of the factorization Σ = LLᵀ. The upper
                    // triangle of the incoming gradient is structural zero
                    // territory, so it is projected away first.
                    let l = self.nodes[i].value.clone();
                    let n = l.nrows();
                    let mut lbar = g.clone();
                    for r in 0..n {
                        for c in (r + 1)..n {
                            lbar[[r, c]] = 0.0;
                        }
                    }
                    let p = phi(l.t().dot(&lbar));
                    let sym = &p + &p.t();
                    let b1 = linalg::solve_lower_t(&l.view(), &sym.view());
                    let tmp = linalg::solve_lower_t(&l.view(), &b1.t().to_owned().view());
                    self.accum(a, tmp.t().mapv(|x| 0.5 * x));
                }
                Op::SolveLower(l, b) => {
                    let lv = self.value(l).clone();
                    let out = self.nodes[i].value.clone();
                    let gt = linalg::solve_lower_t(&lv.view(), &g.view());
                    let gl = -gt.dot(&out.t());
                    self.accum(b, gt);
                    self.accum(l, gl);
                }
                Op::SolveLowerT(l, b) => {
                    let lv = self.value(l).clone();
                    let out = self.nodes[i].value.clone();
                    let gs = linalg::solve_lower(&lv.view(), &g.view());
                    let gl = -out.dot(&gs.t());
                    self.accum(b, gs);
                    self.accum(l, gl);
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].value.clone();
                    self.accum(a, &g * &out);
                }
                Op::Sqrt(a) => {
                    let out = self.nodes[i].value.clone();
                    let ga = Zip::from(&g)
                        .and(&out)
                        .map_collect(|&gi, &oi| 0.5 * gi / oi);
                    self.accum(a, ga);
                }
                Op::Scale(a, c) => {
                    self.accum(a, g.mapv(|x| c * x));
                }
                Op::AddConst(a) | Op::AddDiag(a) => {
                    self.accum(a, g);
                }
                Op::ClampMin(a, t) => {
                    let av = self.value(a).clone();
                    let ga = Zip::from(&g)
                        .and(&av)
                        .map_collect(|&gi, &xi| if xi > t { gi } else { 0.0 });
                    self.accum(a, ga);
                }
                Op::RowSums(a) => {
                    let shape = self.value(a).dim();
                    let ga = g.broadcast(shape).expect("broadcast").to_owned();
                    self.accum(a, ga);
                }
                Op::ColSums(a) => {
                    let shape = self.value(a).dim();
                    let ga = g.broadcast(shape).expect("broadcast").to_owned();
                    self.accum(a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).dim();
                    self.accum(a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumDiag(a) => {
                    let n = self.value(a).nrows();
                    let mut ga = Array2::zeros((n, n));
                    for r in 0..n {
                        ga[[r, r]] = g[[0, 0]];
                    }
                    self.accum(a, ga);
                }
                Op::SumLogDiag(a) => {
                    let av = self.value(a).clone();
                    let n = av.nrows();
                    let mut ga = Array2::zeros((n, n));
                    for r in 0..n {
                        ga[[r, r]] = g[[0, 0]] / av[[r, r]];
                    }
                    self.accum(a, ga);
                }
                Op::LowerWithExpDiag(a) => {
                    let out = self.nodes[i].value.clone();
                    let n = out.nrows();
                    let mut ga = Array2::zeros((n, n));
                    for r in 0..n {
                        ga[[r, r]] = g[[r, r]] * out[[r, r]];
                        for c in 0..r {
                            ga[[r, c]] = g[[r, c]];
                        }
                    }
                    self.accum(a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let shape = self.value(a).dim();
                    let mut ga = Array2::zeros(shape);
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut row = ga.row_mut(idx);
                        row += &g.row(r);
                    }
                    self.accum(a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in &parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        self.accum(p, gp);
                        off += w;
                    }
                }
            }
        }
    }
}
