use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A differentiable operation: a pure forward map plus its vector-Jacobian product.
pub trait Op<T: Real>: 'static {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients for each input given `grad` w.r.t. the output. Entries whose `needs` flag is
    /// false may be returned as `None` and are ignored.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn Op<T>>>,
    op_name: &'static str,
    parents: Vec<usize>,
    label: Option<String>,
}

/// Records a computation graph for one forward pass.
///
/// A tape built with [`Tape::no_grad`] evaluates the same ops without retaining backward
/// closures, so nothing it produces can receive gradients.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.recording,
            op: None,
            op_name: "leaf",
            parents: Vec::new(),
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn apply<O: Op<T>>(&mut self, op: O, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&vals)?
        };
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op_name = op.name();
        self.nodes.push(Node {
            value: out,
            requires_grad,
            op: if requires_grad { Some(Box::new(op)) } else { None },
            op_name,
            parents: inputs.iter().map(|v| v.0).collect(),
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// First node (in evaluation order) holding a NaN or infinity, described for diagnostics.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| {
            let label = self.nearest_label(i).unwrap_or("unlabelled");
            format!("node {i} ({}) shape {:?} near '{label}'", n.op_name, n.value.shape())
        })
    }

    fn nearest_label(&self, mut i: usize) -> Option<&str> {
        loop {
            if let Some(l) = &self.nodes[i].label {
                return Some(l);
            }
            if i == 0 {
                return None;
            }
            i -= 1;
        }
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(invalid("backward", format!("root must be a scalar, got shape {:?}", root_val.shape())));
        }
        self.backward_from(root, Tensor::full(root_val.shape(), T::one()))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_from(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(invalid("backward", "seed shape differs from root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "{}", op.name());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf nodes produced by a reverse pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when no path connects it to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
