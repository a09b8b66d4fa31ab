use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::{apply, vjp, Op};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of the node on its tape.
    pub fn index(&self) -> usize {
        self.index
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Linear record of operations in execution order.
///
/// Every node's inputs precede it, so a single reverse sweep visits each node
/// exactly once. A tape built with [`Tape::inference`] still stores values but
/// never tracks gradients.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, None, Vec::new(), rg)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::State(format!("variable {v:?} is not on tape {}", self.id)));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("foreign variable");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("foreign variable")].requires_grad
    }

    /// Copy of `v`'s value as a constant leaf; blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Apply `op` to recorded inputs and record the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = apply(&op, &refs)?;
        let rg = self.grad_enabled && idx.iter().any(|&i| self.nodes[i].requires_grad);
        let op = rg.then_some(op);
        Ok(self.push(value, op, idx, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[li].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::from_parts(self.nodes[li].value.shape().to_vec(), vec![1.0]));
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(dy) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = vjp(op, &inputs, &node.value, &dy, &needs)?;
            for ((&j, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g.filter(|_| need) else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the seed gradient of the loss itself available.
            if i == li {
                grads[i] = Some(dy);
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].op.is_some() && i != li {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    // ---- convenience wrappers ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(Op::MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.apply(Op::Mean { axis, keep_dim }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize, keep_dim: bool) -> Result<Var> {
        self.apply(Op::Sum { axis, keep_dim }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::L2Normalize { axis }, &[a])
    }

    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::L2Norm { axis }, &[a])
    }

    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Inner, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Op::EmbeddingLookup { ids: ids.to_vec() }, &[table])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(Op::CrossEntropy { targets: targets.to_vec() }, &[logits])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { axes: axes.to_vec() }, &[a])
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf variable.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf (or of the loss itself). `None` when the loss does
    /// not depend on `v` or `v` is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_product_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let x = tape.constant(Tensor::vector(vec![1.5, 0.25, -4.0]));
        let loss = tape.inner(w, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.5, 0.25, -4.0]);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -2.0, 3.25, 1e-3]));
        let n = tape.l2_norm(w, 0).unwrap();
        let sq = tape.mul(n, n).unwrap();
        let loss = tape.scale(sq, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        for (a, b) in g.get(w).unwrap().data().iter().zip(tape.value(w).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_loss_and_foreign_var_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::Argument { .. })));
        let mut other = Tape::new();
        let z = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(z), Err(TensorError::State(_))));
        assert!(matches!(tape.apply(Op::Exp, &[z]), Err(TensorError::State(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn detached_values_block_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn inference_tape_records_no_grad() {
        let mut tape = Tape::inference();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }
}
