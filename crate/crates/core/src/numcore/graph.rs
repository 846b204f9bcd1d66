//! Reverse-mode differentiation over a recorded expression DAG.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::numcore::tensor::{matmul_into, Tensor};

/// Norms below this are treated as a collapsed (degenerate) vector.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise functions accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Tanh,
    Relu,
    Exp,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Unary(NodeId, Elementwise),
    Affine(NodeId, f64),
    MulScalar(NodeId, NodeId),
    L2Normalize(NodeId),
    Transpose(NodeId),
    ConcatRows(NodeId, NodeId),
    Sum(NodeId),
    DiagCrossEntropy(NodeId),
}

#[derive(Clone, Debug)]
pub struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self.op {
            Op::Leaf => vec![],
            Op::Unary(x, _)
            | Op::Affine(x, ..)
            | Op::L2Normalize(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::DiagCrossEntropy(x) => vec![x],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatRows(a, b) => vec![a, b],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros_like(&value);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of a `[m×n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(Error::Dimension(format!(
                "bias {:?} cannot be added to rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        av.check_same_shape(bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn elementwise(&mut self, x: NodeId, f: Elementwise) -> NodeId {
        let xv = self.value(x);
        let v = match f {
            Elementwise::Tanh => xv.map(f64::tanh),
            Elementwise::Relu => xv.map(|v| v.max(0.0)),
            Elementwise::Exp => xv.map(f64::exp),
            Elementwise::Scale(c) => xv.map(|v| c * v),
        };
        self.push(v, Op::Unary(x, f))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Elementwise::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Elementwise::Relu)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Elementwise::Exp)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.elementwise(x, Elementwise::Scale(c))
    }

    /// `a * x + b` elementwise.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = self.value(x).map(|v| a * v + b);
        self.push(v, Op::Affine(x, a))
    }

    /// Multiplies every element of `x` by the scalar node `s` (shape `[1]`).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.shape() != [1] {
            return Err(Error::Dimension(format!(
                "scalar operand has shape {:?}",
                sv.shape()
            )));
        }
        let c = sv.item();
        let v = self.value(x).map(|v| v * c);
        Ok(self.push(v, Op::MulScalar(x, s)))
    }

    /// Normalizes a vector, or every row of a matrix, to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = crate::numcore::tensor::norm(row);
            if !(n >= DEGENERATE_NORM) {
                return Err(Error::DegenerateVector { norm: n });
            }
            row.iter_mut().for_each(|e| *e /= n);
        }
        Ok(self.push(v, Op::L2Normalize(x)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    /// Stacks the rows of `b` below the rows of `a`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(Error::Dimension(format!(
                "cannot stack {:?} over {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::matrix(av.rows() + bv.rows(), av.cols(), data)?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean cross-entropy of each row's softmax against its diagonal entry:
    /// `-(1/N) Σ_i log softmax(logits_i)[i]` for square `logits`.
    pub fn diag_cross_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = self.value(logits);
        if !lv.is_matrix() || lv.rows() != lv.cols() {
            return Err(Error::Dimension(format!(
                "diagonal cross-entropy needs a square matrix, got {:?}",
                lv.shape()
            )));
        }
        let n = lv.rows();
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            total += log_sum_exp(row) - row[i];
        }
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::DiagCrossEntropy(logits),
        ))
    }

    /// Accumulates `∂loss/∂node` into every node's gradient.
    ///
    /// Calling it again without [`Graph::zero_grad`] adds the same gradients
    /// a second time.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.value(loss);
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(root.map(|_| 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            self.nodes[idx].grad.add_assign(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                // dA = dC · Bᵀ
                let bt = bv.transpose()?;
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?)?;
                // dB = Aᵀ · dC
                let at = av.transpose()?;
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.clone())?;
            }
            Op::AddBias(x, b) => {
                accumulate(grads, x, g.clone())?;
                let mut db = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, b, Tensor::vector(db))?;
            }
            Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let zip_mul = |u: &Tensor| -> Result<Tensor> {
                    let d = g.data().iter().zip(u.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), d)
                };
                accumulate(grads, a, zip_mul(bv)?)?;
                accumulate(grads, b, zip_mul(av)?)?;
            }
            Op::Unary(x, f) => {
                let xv = self.value(x);
                let d: Vec<f64> = match f {
                    Elementwise::Tanh => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                    Elementwise::Relu => g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Elementwise::Exp => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y)
                        .collect(),
                    Elementwise::Scale(c) => g.data().iter().map(|g| g * c).collect(),
                };
                accumulate(grads, x, Tensor::new(g.shape().to_vec(), d)?)?;
            }
            Op::Affine(x, a) => accumulate(grads, x, g.map(|v| a * v))?,
            Op::MulScalar(x, s) => {
                let c = self.value(s).item();
                accumulate(grads, x, g.map(|v| v * c))?;
                let ds = crate::numcore::tensor::dot(g.data(), self.value(x).data());
                accumulate(grads, s, Tensor::scalar(ds))?;
            }
            Op::L2Normalize(x) => {
                // d/dx (x/‖x‖) = (I − uuᵀ)/‖x‖
                let xv = self.value(x);
                let mut dx = Tensor::zeros_like(xv);
                for r in 0..xv.rows() {
                    let n = crate::numcore::tensor::norm(xv.row(r));
                    let u = out.row(r);
                    let gr = g.row(r);
                    let ug = crate::numcore::tensor::dot(u, gr);
                    for ((d, gi), ui) in dx.row_mut(r).iter_mut().zip(gr).zip(u) {
                        *d = (gi - ui * ug) / n;
                    }
                }
                accumulate(grads, x, dx)?;
            }
            Op::Transpose(x) => accumulate(grads, x, g.transpose()?)?,
            Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                let (top, bottom) = g.data().split_at(split);
                accumulate(
                    grads,
                    a,
                    Tensor::new(self.value(a).shape().to_vec(), top.to_vec())?,
                )?;
                accumulate(
                    grads,
                    b,
                    Tensor::new(self.value(b).shape().to_vec(), bottom.to_vec())?,
                )?;
            }
            Op::Sum(x) => {
                let c = g.item();
                accumulate(grads, x, self.value(x).map(|_| c))?;
            }
            Op::DiagCrossEntropy(l) => {
                let lv = self.value(l);
                let n = lv.rows();
                let scale = g.item() / n as f64;
                let mut dl = Tensor::zeros_like(lv);
                for i in 0..n {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    for (j, (d, v)) in dl.row_mut(i).iter_mut().zip(row).enumerate() {
                        let p = (v - lse).exp();
                        *d = scale * (p - if i == j { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, l, dl)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec3(g: &mut Graph, v: [f64; 3]) -> NodeId {
        g.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        g.backward(c).unwrap();
        // dA = dC·Bᵀ, dB = Aᵀ·dC
        assert_eq!(g.grad(a).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let u = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(u).data(), &[0.6, 0.8]);
        let y = g.leaf(Tensor::vector(vec![2.0, 0.0, 0.0]));
        let uy = g.l2_normalize(y).unwrap();
        assert_eq!(g.value(uy).data(), &[1.0, 0.0, 0.0]);
        let again = g.l2_normalize(u).unwrap();
        for (a, b) in g.value(again).data().iter().zip(g.value(u).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_rejects_degenerate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1e-13, 0.0]));
        assert!(matches!(
            g.l2_normalize(x),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let t = g.tanh(x);
        assert_eq!(g.value(t).data()[1], 0.0);
        let s = g.scale(x, 1.0);
        assert_eq!(g.value(s), g.value(x));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [0.5, -2.0, 7.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [0.5, -2.0, 7.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn reused_node_sums_contributions() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [1.0, -3.0, 0.25]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -6.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [1.0, 2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [1.0, 2.0, 3.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn parents_form_dag() {
        let mut g = Graph::new();
        let x = vec3(&mut g, [1.0, 2.0, 3.0]);
        let y = g.tanh(x);
        let z = g.add(x, y).unwrap();
        for id in [x, y, z] {
            for p in g.node(id).parents() {
                assert!(p.index() < id.index());
            }
        }
        assert_eq!(g.node(z).parents(), vec![x, y]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_n() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::matrix(3, 3, vec![0.4; 9]).unwrap());
        let ce = g.diag_cross_entropy(l).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-15);
    }
}
