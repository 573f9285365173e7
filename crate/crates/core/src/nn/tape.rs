use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A differentiable operation recorded on the tape. Implementations push
/// per-parent gradient contributions into the sink; values of any node are
/// available through the context.
pub trait TapeOp<T: Scalar>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn parents(&self) -> Vec<Var>;
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &Tensor<T>, sink: &mut GradSink<T>)
        -> Result<()>;
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Option<Box<dyn TapeOp<T>>>,
    pub requires_grad: bool,
    pub label: String,
}

/// Read access to node values during the backward pass.
pub struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    out: Var,
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn out_value(&self) -> &'a Tensor<T> {
        &self.nodes[self.out.0].value
    }
}

/// Gradient accumulator indexed by node. Contributions to nodes that do
/// not require gradients are dropped.
pub struct GradSink<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
}

impl<T: Scalar> GradSink<T> {
    pub fn add(&mut self, var: Var, contribution: Tensor<T>) -> Result<()> {
        if !self.requires[var.0] {
            return Ok(());
        }
        match &mut self.grads[var.0] {
            Some(g) => g.add_in_place(&contribution),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    pub fn wants(&self, var: Var) -> bool {
        self.requires[var.0]
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Append-only arena of tensors and the ops that produced them. Nodes only
/// reference earlier nodes, so reverse index order is a valid reverse
/// topological order for backpropagation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    scope: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Push a name component used in diagnostics for nodes created while
    /// the scope is held.
    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn label_for(&self, op_name: &str) -> String {
        if self.scope.is_empty() {
            op_name.to_string()
        } else {
            format!("{}/{}", self.scope.join("/"), op_name)
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, None, false, "constant")
            .expect("constants are not scanned")
    }

    /// Differentiable input (parameters, probe points).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, None, true, "leaf")
            .expect("leaves are not scanned")
    }

    /// [`Tape::constant`] carrying a diagnostic name.
    pub fn constant_labeled(&mut self, value: Tensor<T>, name: impl AsRef<str>) -> Var {
        self.push_node(value, None, false, name.as_ref())
            .expect("constants are not scanned")
    }

    /// [`Tape::leaf`] carrying a diagnostic name.
    pub fn leaf_labeled(&mut self, value: Tensor<T>, name: impl AsRef<str>) -> Var {
        self.push_node(value, None, true, name.as_ref())
            .expect("leaves are not scanned")
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Record an op node. Fails fast when the op produced a non-finite
    /// value, naming the op and its enclosing scope.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Box<dyn TapeOp<T>>) -> Result<Var> {
        let requires = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let name = op.name();
        self.push_node(value, Some(op), requires, name)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        op: Option<Box<dyn TapeOp<T>>>,
        requires_grad: bool,
        name: &str,
    ) -> Result<Var> {
        let label = self.label_for(name);
        if op.is_some() {
            if let Some(i) = value.first_non_finite() {
                return Err(Error::numeric(
                    label,
                    format!("non-finite output at flat index {i}"),
                ));
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `root` seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let seed = Tensor::filled(self.nodes[root.0].value.shape(), T::one());
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar, found shape {:?}; use backward_with",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        self.backward_with(root, seed)
    }

    /// Reverse-mode sweep with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed shape {:?} against root shape {:?}",
                    seed.shape(),
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if sink.requires[root.0] {
            sink.grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else { continue };
            let Some(grad_out) = sink.grads[i].clone() else {
                continue;
            };
            if let Some(j) = grad_out.first_non_finite() {
                return Err(Error::numeric(
                    node.label.clone(),
                    format!("non-finite gradient at flat index {j}"),
                ));
            }
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                out: Var(i),
            };
            op.backward(&ctx, &grad_out, &mut sink)
                .map_err(|e| match e {
                    Error::Shape { detail, .. } => Error::shape(node.label.clone(), detail),
                    Error::Numeric { detail, .. } => Error::numeric(node.label.clone(), detail),
                    other => other,
                })?;
        }
        Ok(Gradients { grads: sink.grads })
    }
}
