//! A recording backend and its reverse sweep.
//!
//! Every [`Backend`] call appends a node holding the forward value and the
//! operands needed to differentiate it. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a reverse topological order because a
//! node can only refer to earlier ones.

use crate::backend::{Activation, Backend, Value};
use crate::error::{invalid, shape, Result};
use crate::tensor::{self, BoundaryMode, Field};

use super::loss::{h1_norm_sq, h1_norm_sq_grad};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        k: NodeId,
        mode: BoundaryMode,
        stride: usize,
    },
    Prolong {
        x: NodeId,
        k: NodeId,
        mode: BoundaryMode,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Gelu(NodeId),
    ChannelMix {
        x: NodeId,
        m: NodeId,
        b: NodeId,
    },
    MaskRing(NodeId),
    /// `‖x − t‖² / ‖t‖²` against a fixed target.
    RelL2Sq {
        x: NodeId,
        target: Field,
    },
    /// `|x − t|²_{H¹} / |t|²_{H¹}` against a fixed target.
    RelH1Sq {
        x: NodeId,
        target: Field,
        h: f64,
    },
    /// `scale · Σ inputs` over scalar nodes.
    ScaledSum {
        inputs: Vec<NodeId>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    /// Some gradient path leads from a parameter to this node.
    tracked: bool,
}

/// Deliberately wrong backward rules, used to show the gradient check
/// catches them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the GELU derivative.
    GeluSign,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients from one reverse sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient with respect to `id`; `None` only for untracked nodes.
    pub fn get(&self, id: NodeId) -> Option<&Value> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Value> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Value>, g: Value) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, v: Value) -> NodeId {
        self.push(Op::Leaf, v, true)
    }

    fn push(&mut self, op: Op, value: Value, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        self.nodes.len() - 1
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    fn node_field(&self, id: NodeId) -> Result<&Field> {
        self.nodes[id].value.as_field()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        match self.nodes[id].value {
            Value::Scalar(s) => Ok(s),
            ref other => Err(shape(format!("expected scalar, found {}", other.kind()))),
        }
    }

    pub fn rel_l2_sq(&mut self, x: NodeId, target: &Field) -> Result<NodeId> {
        let v = super::loss::rel_l2_sq(self.node_field(x)?, target)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::RelL2Sq { x, target: target.clone() }, Value::Scalar(v), tracked))
    }

    pub fn rel_h1_sq(&mut self, x: NodeId, target: &Field, h: f64) -> Result<NodeId> {
        let v = super::loss::rel_h1_sq(self.node_field(x)?, target, h)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::RelH1Sq { x, target: target.clone(), h }, Value::Scalar(v), tracked))
    }

    pub fn scaled_sum(&mut self, inputs: &[NodeId], scale: f64) -> Result<NodeId> {
        let mut total = 0.0;
        for &i in inputs {
            total += self.scalar(i)?;
        }
        let tracked = self.tracked(inputs);
        Ok(self.push(Op::ScaledSum { inputs: inputs.to_vec(), scale }, Value::Scalar(scale * total), tracked))
    }

    /// Reverse sweep from the scalar node `loss`. Every tracked leaf gets a
    /// gradient, zero if the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(invalid(format!("node {loss} is not on this tape")));
        }
        if !matches!(self.nodes[loss].value, Value::Scalar(_)) {
            return Err(shape(format!(
                "backward needs a scalar loss, node {loss} is a {}",
                self.nodes[loss].value.kind()
            )));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Value::Scalar(1.0));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (target, contribution) in self.local_grads(node, &g)? {
                if self.nodes[target].tracked {
                    accumulate(&mut grads[target], contribution);
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to its operands.
    fn local_grads(&self, node: &Node, g: &Value) -> Result<Vec<(NodeId, Value)>> {
        let want = |id: NodeId| self.nodes[id].tracked;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, mode, stride } => {
                let (g, xv, kv) = (g.as_field()?, self.node_field(*x)?, self.nodes[*k].value.as_kernel()?);
                if want(*x) {
                    let dx = tensor::conv2d_grad_input(g, kv, *mode, *stride, xv.height(), xv.width())?;
                    out.push((*x, Value::Field(dx)));
                }
                if want(*k) {
                    let dk = tensor::conv2d_grad_kernel(xv, g, *mode, *stride, kv.kh(), kv.kw())?;
                    out.push((*k, Value::Kernel(dk)));
                }
            }
            Op::Prolong { x, k, mode } => {
                let (g, xv, kv) = (g.as_field()?, self.node_field(*x)?, self.nodes[*k].value.as_kernel()?);
                if want(*x) {
                    let dx = tensor::prolong_grad_input(g, kv, *mode, xv.height(), xv.width())?;
                    out.push((*x, Value::Field(dx)));
                }
                if want(*k) {
                    let dk = tensor::prolong_grad_kernel(xv, g, (kv.kh(), kv.kw()), *mode)?;
                    out.push((*k, Value::Kernel(dk)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, Value::Field(g.as_field()?.scale(-1.0))));
            }
            Op::Gelu(x) => {
                let sign = if self.fault == Some(Fault::GeluSign) { -1.0 } else { 1.0 };
                let mut dx = g.as_field()?.clone();
                for (d, xi) in dx.data_mut().iter_mut().zip(self.node_field(*x)?.data()) {
                    *d *= sign * tensor::gelu_derivative(*xi);
                }
                out.push((*x, Value::Field(dx)));
            }
            Op::ChannelMix { x, m, b } => {
                let (dx, dm, db) =
                    tensor::channel_mix_grads(self.node_field(*x)?, self.nodes[*m].value.as_matrix()?, g.as_field()?);
                out.push((*x, Value::Field(dx)));
                out.push((*m, Value::Matrix(dm)));
                out.push((*b, Value::Vector(db)));
            }
            Op::MaskRing(x) => out.push((*x, Value::Field(g.as_field()?.mask_ring()))),
            Op::RelL2Sq { x, target } => {
                let s = scalar_of(g)?;
                let e = self.node_field(*x)?.sub(target)?;
                out.push((*x, Value::Field(e.scale(2.0 * s / target.norm_sq()))));
            }
            Op::RelH1Sq { x, target, h } => {
                let s = scalar_of(g)?;
                let e = self.node_field(*x)?.sub(target)?;
                let denom = h1_norm_sq(target, *h);
                out.push((*x, Value::Field(h1_norm_sq_grad(&e, *h).scale(s / denom))));
            }
            Op::ScaledSum { inputs, scale } => {
                let s = scalar_of(g)? * scale;
                for &i in inputs {
                    out.push((i, Value::Scalar(s)));
                }
            }
        }
        Ok(out)
    }
}

fn scalar_of(v: &Value) -> Result<f64> {
    match v {
        Value::Scalar(s) => Ok(*s),
        other => Err(shape(format!("expected scalar gradient, found {}", other.kind()))),
    }
}

impl Backend for Tape {
    type Var = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Value {
        &self.nodes[*v].value
    }

    fn constant(&mut self, v: Value) -> NodeId {
        self.push(Op::Leaf, v, false)
    }

    fn conv2d(&mut self, x: &NodeId, k: &NodeId, mode: BoundaryMode, stride: usize) -> Result<NodeId> {
        let out = tensor::conv2d(self.node_field(*x)?, self.nodes[*k].value.as_kernel()?, mode, stride)?;
        let tracked = self.tracked(&[*x, *k]);
        Ok(self.push(Op::Conv2d { x: *x, k: *k, mode, stride }, Value::Field(out), tracked))
    }

    fn prolong(&mut self, x: &NodeId, k: &NodeId, mode: BoundaryMode, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = tensor::prolong(self.node_field(*x)?, self.nodes[*k].value.as_kernel()?, mode, out_h, out_w)?;
        let tracked = self.tracked(&[*x, *k]);
        Ok(self.push(Op::Prolong { x: *x, k: *k, mode }, Value::Field(out), tracked))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = self.node_field(*a)?.add(self.node_field(*b)?)?;
        let tracked = self.tracked(&[*a, *b]);
        Ok(self.push(Op::Add(*a, *b), Value::Field(out), tracked))
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = self.node_field(*a)?.sub(self.node_field(*b)?)?;
        let tracked = self.tracked(&[*a, *b]);
        Ok(self.push(Op::Sub(*a, *b), Value::Field(out), tracked))
    }

    fn activation(&mut self, x: &NodeId, act: Activation) -> Result<NodeId> {
        match act {
            Activation::Identity => Ok(*x),
            Activation::Gelu => {
                let out = tensor::gelu(self.node_field(*x)?);
                let tracked = self.tracked(&[*x]);
                Ok(self.push(Op::Gelu(*x), Value::Field(out), tracked))
            }
        }
    }

    fn channel_mix(&mut self, x: &NodeId, m: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = tensor::channel_mix(
            self.node_field(*x)?,
            self.nodes[*m].value.as_matrix()?,
            self.nodes[*b].value.as_vector()?,
        )?;
        let tracked = self.tracked(&[*x, *m, *b]);
        Ok(self.push(Op::ChannelMix { x: *x, m: *m, b: *b }, Value::Field(out), tracked))
    }

    fn mask_ring(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = self.node_field(*x)?.mask_ring();
        let tracked = self.tracked(&[*x]);
        Ok(self.push(Op::MaskRing(*x), Value::Field(out), tracked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Kernel, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Field {
        Field::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_kernel(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> Kernel {
        Kernel::new(o, i, k, k, (0..o * i * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gelu_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Value::Field(Field::zeros(1, 1, 1)));
        let y = t.activation(&x, Activation::Gelu).unwrap();
        let target = Field::filled(1, 1, 1, 1.0);
        // ‖y − 1‖² / 1 has derivative 2(y − 1)·gelu'(0) = −2·0.5 at y = 0.
        let l = t.rel_l2_sq(y, &target).unwrap();
        let g = t.backward(l).unwrap();
        assert!((g.get(x).unwrap().data()[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Value::Field(Field::zeros(1, 2, 2)));
        assert!(t.backward(x).is_err());
    }

    /// ‖k ∗ u‖² against the dense matrix of the map k ↦ k ∗ u.
    #[test]
    fn kernel_gradient_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_field(&mut rng, 1, 3, 3);
        let k = rand_kernel(&mut rng, 1, 1, 3);
        for mode in BoundaryMode::PADDED {
            // Column j of M is (e_j ∗ u) for the j-th unit kernel.
            let cols: Vec<Vec<f64>> = (0..9)
                .map(|j| {
                    let mut e = Kernel::zeros(1, 1, 3, 3);
                    e.weights_mut()[j] = 1.0;
                    tensor::conv2d(&u, &e, mode, 1).unwrap().into_data()
                })
                .collect();
            let y = tensor::conv2d(&u, &k, mode, 1).unwrap();
            // ∇_k ‖Mk‖² = 2 Mᵀ M k = 2 Mᵀ y.
            let dense: Vec<f64> =
                cols.iter().map(|c| 2.0 * c.iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>()).collect();

            let mut t = Tape::new();
            let un = t.constant(Value::Field(u.clone()));
            let kn = t.param(Value::Kernel(k.clone()));
            let yn = t.conv2d(&un, &kn, mode, 1).unwrap();
            // Loss ‖y − e₀‖² (unit-norm target) has gradient 2Mᵀy − 2Mᵀe₀.
            let mut tgt = Field::zeros(1, 3, 3);
            tgt.data_mut()[0] = 1.0;
            let l = t.rel_l2_sq(yn, &tgt).unwrap();
            let g = t.backward(l).unwrap();
            let shift: Vec<f64> = cols.iter().map(|c| 2.0 * c[0]).collect();
            for j in 0..9 {
                let analytic = g.get(kn).unwrap().data()[j] + shift[j];
                assert!((analytic - dense[j]).abs() < 1e-10, "{mode:?} tap {j}");
            }
        }
    }

    #[test]
    fn every_tracked_leaf_gets_a_gradient() {
        let mut t = Tape::new();
        let unused = t.param(Value::Matrix(Matrix::identity(2)));
        let x = t.param(Value::Field(Field::filled(1, 2, 2, 0.5)));
        let l = t.rel_l2_sq(x, &Field::filled(1, 2, 2, 1.0)).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn fault_flips_gelu_rule() {
        let run = |mut t: Tape| {
            let x = t.param(Value::Field(Field::filled(1, 1, 1, 0.3)));
            let y = t.activation(&x, Activation::Gelu).unwrap();
            let l = t.rel_l2_sq(y, &Field::filled(1, 1, 1, 1.0)).unwrap();
            t.backward(l).unwrap().get(x).unwrap().data()[0]
        };
        assert_eq!(run(Tape::new()), -run(Tape::with_fault(Fault::GeluSign)));
    }
}
