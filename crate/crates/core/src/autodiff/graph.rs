//! Reverse-mode differentiation over an explicit per-batch graph.
//!
//! A [`Graph`] is a tape of nodes built fresh for each training step. Leaves
//! are constants or borrowed parameter values; interior nodes record the
//! operation that produced them. [`Graph::backward`] walks the tape in
//! reverse and writes parameter gradients into the owning [`ParamStore`],
//! accumulating additively so multiple losses or repeated passes compose.
//!
//! Every committed node holds finite values: operations that could produce
//! NaN or infinity (log of a non-positive value, overflowing exp) fail with
//! an error instead of poisoning the tape.

use crate::autodiff::kernels;
use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm threshold below which normalization and cosine similarity refuse to
/// divide.
pub const NORM_EPSILON: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    /// `A (m x k) * B (k x n)`.
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `A (m x k) * B^T (n x k)`: rows of A dotted with rows of B.
    MatmulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise product.
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    /// Add a length-n vector to every row of an `m x n` matrix.
    AddRowBroadcast {
        x: NodeId,
        bias: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// Column means of a matrix: `m x n -> n`.
    RowMean {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Log {
        x: NodeId,
    },
    /// Sum of all elements, any rank -> scalar.
    Sum {
        x: NodeId,
    },
    /// Concatenate scalars and vectors into one vector.
    Concat {
        parts: Vec<NodeId>,
    },
    /// Divide each row of a matrix by its Euclidean norm.
    RowL2Normalize {
        x: NodeId,
    },
    /// Each output row is a weighted sum of input rows.
    CombineRows {
        x: NodeId,
        combos: Vec<Vec<(usize, f64)>>,
    },
    /// Pick scalar elements (by flat index) from arbitrary nodes into a
    /// vector, scaling each by `factor`.
    GatherScaled {
        sources: Vec<(NodeId, usize)>,
        factor: f64,
    },
    /// Numerically stable log of the sum of exponentials of a vector.
    LogSumExp {
        x: NodeId,
    },
    /// Cosine similarity of two vectors.
    CosineSim {
        a: NodeId,
        b: NodeId,
    },
    /// Fixed-coefficient combination of scalar nodes. The coefficients are
    /// plain numbers, so no gradient flows into them.
    AffineCombine {
        parts: Vec<(NodeId, f64)>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a rank-0 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].value.scalar_value()
    }

    /// Insert a constant leaf. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_node(Op::Leaf { param: None }, value, false)
    }

    /// Insert a leaf borrowing the current value of a stored parameter.
    /// Gradients flow back to the store only for trainable parameters.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.param(id);
        self.push_node(Op::Leaf { param: Some(id) }, p.value.clone(), p.trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(self.shape_error("matmul", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        self.push_checked(Op::Matmul { a, b }, value, "matmul")
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(self.shape_error("matmul_nt", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let data = kernels::matmul_nt(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        self.push_checked(Op::MatmulNt { a, b }, value, "matmul_nt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite {
                context: "scale factor".into(),
            });
        }
        let xv = self.value(x);
        let value = Tensor::from_shape_vec(
            xv.shape().to_vec(),
            kernels::map_unary(xv.data(), |v| v * factor),
        )?;
        self.push_checked(Op::Scale { x, factor }, value, "scale")
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !xv.is_matrix() || bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(self.shape_error("add_bias", x, bias));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv.data()[j];
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push_checked(Op::AddRowBroadcast { x, bias }, value, "add_bias")
    }

    /// Rectified linear unit; the subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value = Tensor::from_shape_vec(
            xv.shape().to_vec(),
            kernels::map_unary(xv.data(), |v| if v > 0.0 { v } else { 0.0 }),
        )?;
        self.push_checked(Op::Relu { x }, value, "relu")
    }

    /// Mean over the rows of a matrix, yielding one value per column.
    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() || xv.rows() == 0 {
            return Err(self.shape_error_unary("row_mean", x));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xv.at(i, j);
            }
        }
        let inv = 1.0 / m as f64;
        for o in &mut out {
            *o *= inv;
        }
        self.push_checked(Op::RowMean { x }, Tensor::vector(out), "row_mean")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value = Tensor::from_shape_vec(
            xv.shape().to_vec(),
            kernels::map_unary(xv.data(), f64::exp),
        )?;
        self.push_checked(Op::Exp { x }, value, "exp")
    }

    /// Natural logarithm; fails on non-positive inputs rather than emitting
    /// NaN or negative infinity.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite {
                context: "log of a non-positive value".into(),
            });
        }
        let value = Tensor::from_shape_vec(
            xv.shape().to_vec(),
            kernels::map_unary(xv.data(), f64::ln),
        )?;
        self.push_checked(Op::Log { x }, value, "log")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let total: f64 = xv.data().iter().sum();
        self.push_checked(Op::Sum { x }, Tensor::scalar(total), "sum")
    }

    /// Concatenate scalar and vector nodes into one vector, in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero nodes".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() > 1 {
                return Err(self.shape_error_unary("concat", p));
            }
            data.extend_from_slice(pv.data());
        }
        self.push_checked(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::vector(data),
            "concat",
        )
    }

    /// Divide each row of a matrix by its Euclidean norm. Rows with norm at
    /// or below [`NORM_EPSILON`] are an error.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(self.shape_error_unary("normalize_rows", x));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let norms = kernels::row_l2_norms(xv.data(), m, n);
        for (i, &norm) in norms.iter().enumerate() {
            if norm <= NORM_EPSILON {
                return Err(Error::DegenerateVector {
                    context: format!("row {i} of normalize_rows"),
                    norm,
                    limit: NORM_EPSILON,
                });
            }
        }
        let mut data = xv.data().to_vec();
        for i in 0..m {
            let norm = norms[i];
            for v in &mut data[i * n..(i + 1) * n] {
                *v /= norm;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push_checked(Op::RowL2Normalize { x }, value, "normalize_rows")
    }

    /// Build a new matrix whose rows are fixed-weight combinations of the
    /// rows of `x`. Row `o` of the output is `sum of w * x[s]` over the
    /// entries `(s, w)` of `combos[o]`. The weights are plain numbers and
    /// receive no gradient.
    pub fn combine_rows(&mut self, x: NodeId, combos: Vec<Vec<(usize, f64)>>) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(self.shape_error_unary("combine_rows", x));
        }
        if combos.is_empty() {
            return Err(Error::Config("combine_rows with zero output rows".into()));
        }
        let (rows, n) = (xv.rows(), xv.cols());
        for (o, combo) in combos.iter().enumerate() {
            if combo.is_empty() {
                return Err(Error::Config(format!(
                    "combine_rows output row {o} has no source rows"
                )));
            }
            for &(s, w) in combo {
                if s >= rows {
                    return Err(Error::Config(format!(
                        "combine_rows output row {o} references source row {s} of {rows}"
                    )));
                }
                if !w.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("combine_rows weight for output row {o}"),
                    });
                }
            }
        }
        let mut data = vec![0.0; combos.len() * n];
        for (o, combo) in combos.iter().enumerate() {
            let out_row = &mut data[o * n..(o + 1) * n];
            for &(s, w) in combo {
                let src = xv.row(s);
                for (r, &v) in out_row.iter_mut().zip(src) {
                    *r += w * v;
                }
            }
        }
        let value = Tensor::matrix(combos.len(), n, data)?;
        self.push_checked(Op::CombineRows { x, combos }, value, "combine_rows")
    }

    /// Gather scalar elements from arbitrary nodes (by flat index) into a
    /// vector, scaling each by `factor`.
    pub fn gather_scaled(&mut self, sources: &[(NodeId, usize)], factor: f64) -> Result<NodeId> {
        if sources.is_empty() {
            return Err(Error::Config("gather_scaled of zero elements".into()));
        }
        if !factor.is_finite() {
            return Err(Error::NonFinite {
                context: "gather_scaled factor".into(),
            });
        }
        let mut data = Vec::with_capacity(sources.len());
        for &(node, idx) in sources {
            let nv = self.value(node);
            if idx >= nv.len() {
                return Err(Error::Config(format!(
                    "gather_scaled index {idx} out of range for node of {} elements",
                    nv.len()
                )));
            }
            data.push(factor * nv.data()[idx]);
        }
        self.push_checked(
            Op::GatherScaled {
                sources: sources.to_vec(),
                factor,
            },
            Tensor::vector(data),
            "gather_scaled",
        )
    }

    /// Stable `log(sum(exp(x)))` of a vector: the maximum is subtracted
    /// before exponentiation, so large similarities do not overflow.
    pub fn log_sum_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.is_empty() {
            return Err(self.shape_error_unary("log_sum_exp", x));
        }
        let max = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted: f64 = xv.data().iter().map(|&v| (v - max).exp()).sum();
        let value = Tensor::scalar(max + shifted.ln());
        self.push_checked(Op::LogSumExp { x }, value, "log_sum_exp")
    }

    /// Cosine similarity of two vector nodes. Either vector having norm at
    /// or below [`NORM_EPSILON`] is an error.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || bv.shape().len() != 1 || av.len() != bv.len() {
            return Err(self.shape_error("cosine_sim", a, b));
        }
        let na = kernels::row_l2_norms(av.data(), 1, av.len())[0];
        let nb = kernels::row_l2_norms(bv.data(), 1, bv.len())[0];
        for (side, norm) in [("left", na), ("right", nb)] {
            if norm <= NORM_EPSILON {
                return Err(Error::DegenerateVector {
                    context: format!("{side} operand of cosine_sim"),
                    norm,
                    limit: NORM_EPSILON,
                });
            }
        }
        let value = Tensor::scalar(kernels::dot(av.data(), bv.data()) / (na * nb));
        self.push_checked(Op::CosineSim { a, b }, value, "cosine_sim")
    }

    /// Fixed-coefficient combination of scalar nodes:
    /// `sum of coefficient * node`. Coefficients are constants with respect
    /// to differentiation; gradients flow only into the nodes.
    pub fn affine_combine(&mut self, parts: &[(NodeId, f64)]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("affine_combine of zero terms".into()));
        }
        let mut total = 0.0;
        for &(node, w) in parts {
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    context: "affine_combine coefficient".into(),
                });
            }
            total += w * self.scalar(node)?;
        }
        self.push_checked(
            Op::AffineCombine {
                parts: parts.to_vec(),
            },
            Tensor::scalar(total),
            "affine_combine",
        )
    }

    /// Reverse pass from a scalar `loss` node. Gradients for trainable
    /// parameter leaves are accumulated into `store`; calling this twice
    /// without clearing the store doubles them.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::ShapeMismatch {
                context: "backward root".into(),
                left: vec![],
                right: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        adjoints[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate_grad(*pid, &g)?;
                    }
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.wants(*a) {
                        let da = kernels::matmul_nt(&g, bv.data(), m, n, k);
                        add_into(&mut adjoints[a.0], &da);
                    }
                    if self.wants(*b) {
                        let db = kernels::matmul_tn(av.data(), &g, m, k, n);
                        add_into(&mut adjoints[b.0], &db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if self.wants(*a) {
                        let da = kernels::matmul(&g, bv.data(), m, n, k);
                        add_into(&mut adjoints[a.0], &da);
                    }
                    if self.wants(*b) {
                        let db = kernels::matmul_tn(&g, av.data(), m, n, k);
                        add_into(&mut adjoints[b.0], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.wants(*a) {
                        add_into(&mut adjoints[a.0], &g);
                    }
                    if self.wants(*b) {
                        add_into(&mut adjoints[b.0], &g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.wants(*a) {
                        add_into(&mut adjoints[a.0], &g);
                    }
                    if self.wants(*b) {
                        scaled_add_into(&mut adjoints[b.0], &g, -1.0);
                    }
                }
                Op::Mul { a, b } => {
                    if self.wants(*a) {
                        let bv = self.value(*b);
                        let da = kernels::map_binary(&g, bv.data(), |gv, v| gv * v);
                        add_into(&mut adjoints[a.0], &da);
                    }
                    if self.wants(*b) {
                        let av = self.value(*a);
                        let db = kernels::map_binary(&g, av.data(), |gv, v| gv * v);
                        add_into(&mut adjoints[b.0], &db);
                    }
                }
                Op::Scale { x, factor } => {
                    if self.wants(*x) {
                        scaled_add_into(&mut adjoints[x.0], &g, *factor);
                    }
                }
                Op::AddRowBroadcast { x, bias } => {
                    let (m, n) = {
                        let xv = self.value(*x);
                        (xv.rows(), xv.cols())
                    };
                    if self.wants(*x) {
                        add_into(&mut adjoints[x.0], &g);
                    }
                    if self.wants(*bias) {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for (j, d) in db.iter_mut().enumerate() {
                                *d += g[i * n + j];
                            }
                        }
                        add_into(&mut adjoints[bias.0], &db);
                    }
                }
                Op::Relu { x } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let dx = kernels::map_binary(&g, xv.data(), |gv, v| {
                            if v > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        });
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::RowMean { x } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let (m, n) = (xv.rows(), xv.cols());
                        let inv = 1.0 / m as f64;
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = g[j] * inv;
                            }
                        }
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::Exp { x } => {
                    if self.wants(*x) {
                        let out = &node.value;
                        let dx = kernels::map_binary(&g, out.data(), |gv, v| gv * v);
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::Log { x } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let dx = kernels::map_binary(&g, xv.data(), |gv, v| gv / v);
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::Sum { x } => {
                    if self.wants(*x) {
                        let len = self.value(*x).len();
                        let dx = vec![g[0]; len];
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.wants(p) {
                            add_into(&mut adjoints[p.0], &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::RowL2Normalize { x } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let (m, n) = (xv.rows(), xv.cols());
                        let norms = kernels::row_l2_norms(xv.data(), m, n);
                        let out = &node.value;
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            let y = out.row(i);
                            let gr = &g[i * n..(i + 1) * n];
                            let proj = kernels::dot(gr, y);
                            let inv = 1.0 / norms[i];
                            for j in 0..n {
                                dx[i * n + j] = (gr[j] - proj * y[j]) * inv;
                            }
                        }
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::CombineRows { x, combos } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let (rows, n) = (xv.rows(), xv.cols());
                        let mut dx = vec![0.0; rows * n];
                        for (o, combo) in combos.iter().enumerate() {
                            let gr = &g[o * n..(o + 1) * n];
                            for &(s, w) in combo {
                                let dst = &mut dx[s * n..(s + 1) * n];
                                for (d, &gv) in dst.iter_mut().zip(gr) {
                                    *d += w * gv;
                                }
                            }
                        }
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::GatherScaled { sources, factor } => {
                    for (pos, &(src, idx)) in sources.iter().enumerate() {
                        if self.wants(src) {
                            let len = self.value(src).len();
                            let slot = &mut adjoints[src.0];
                            if slot.is_none() {
                                *slot = Some(vec![0.0; len]);
                            }
                            slot.as_mut().unwrap()[idx] += factor * g[pos];
                        }
                    }
                }
                Op::LogSumExp { x } => {
                    if self.wants(*x) {
                        let xv = self.value(*x);
                        let lse = node.value.scalar_value()?;
                        let dx: Vec<f64> = xv.data().iter().map(|&v| g[0] * (v - lse).exp()).collect();
                        add_into(&mut adjoints[x.0], &dx);
                    }
                }
                Op::CosineSim { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let na = kernels::row_l2_norms(av.data(), 1, av.len())[0];
                    let nb = kernels::row_l2_norms(bv.data(), 1, bv.len())[0];
                    let s = node.value.scalar_value()?;
                    let cross = 1.0 / (na * nb);
                    if self.wants(*a) {
                        let da: Vec<f64> = av
                            .data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&x, &y)| g[0] * (y * cross - s * x / (na * na)))
                            .collect();
                        add_into(&mut adjoints[a.0], &da);
                    }
                    if self.wants(*b) {
                        let db: Vec<f64> = av
                            .data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&x, &y)| g[0] * (x * cross - s * y / (nb * nb)))
                            .collect();
                        add_into(&mut adjoints[b.0], &db);
                    }
                }
                Op::AffineCombine { parts } => {
                    for &(p, w) in parts {
                        if self.wants(p) {
                            let slot = &mut adjoints[p.0];
                            if slot.is_none() {
                                *slot = Some(vec![0.0]);
                            }
                            slot.as_mut().unwrap()[0] += w * g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn requires_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    fn push_node(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn push_checked(&mut self, op: Op, value: Tensor, context: &str) -> Result<NodeId> {
        value.ensure_finite(context)?;
        let requires = match &op {
            Op::Leaf { .. } => false,
            Op::Matmul { a, b }
            | Op::MatmulNt { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::CosineSim { a, b } => self.requires_any(&[*a, *b]),
            Op::AddRowBroadcast { x, bias } => self.requires_any(&[*x, *bias]),
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::RowMean { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Sum { x }
            | Op::RowL2Normalize { x }
            | Op::CombineRows { x, .. }
            | Op::LogSumExp { x } => self.wants(*x),
            Op::Concat { parts } => self.requires_any(parts),
            Op::GatherScaled { sources, .. } => sources.iter().any(|&(n, _)| self.wants(n)),
            Op::AffineCombine { parts } => parts.iter().any(|&(n, _)| self.wants(n)),
        };
        Ok(self.push_node(op, value, requires))
    }

    fn shape_error(&self, context: &str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            context: context.into(),
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    fn shape_error_unary(&self, context: &str, x: NodeId) -> Error {
        Error::ShapeMismatch {
            context: context.into(),
            left: self.value(x).shape().to_vec(),
            right: vec![],
        }
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &str,
        f: impl Fn(f64, f64) -> f64 + Sync + Send,
        make_op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_error(context, a, b));
        }
        let value = Tensor::from_shape_vec(
            av.shape().to_vec(),
            kernels::map_binary(av.data(), bv.data(), f),
        )?;
        self.push_checked(make_op(a, b), value, context)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn scaled_add_into(slot: &mut Option<Vec<f64>>, delta: &[f64], factor: f64) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += factor * d;
            }
        }
        None => *slot = Some(delta.iter().map(|&d| factor * d).collect()),
    }
}
