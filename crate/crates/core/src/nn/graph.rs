//! Define-by-run reverse-mode differentiation.
//!
//! Every operation returns a [`Var`] holding its value, its parents and a
//! closure mapping the output gradient to parent gradients. Nodes whose
//! parents carry no gradient are stored as constants without a closure.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamId;
use super::tensor::Tensor;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Var]) -> Vec<Option<Tensor>>>;

pub(crate) struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("param", &self.0.param)
            .finish()
    }
}

impl Var {
    /// A value that never receives gradient.
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        }))
    }

    /// A differentiable input; its gradient is retained by [`backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        }))
    }

    pub(crate) fn parameter(id: ParamId, value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: Some(id),
        }))
    }

    /// Build an op node. `backward` receives the output gradient and the parents.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Self(Rc::new(Node {
            value,
            parents,
            backward: Some(backward),
            requires_grad: true,
            param: None,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f32 {
        assert_eq!(self.0.value.len(), 1, "item() on a non-scalar");
        self.0.value.data()[0]
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }
}

/// Gradients produced by one backward pass.
#[derive(Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<*const Node, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn leaf(&self, v: &Var) -> Option<&Tensor> {
        self.leaves.get(&v.key())
    }

    /// Accumulate another pass (e.g. the second sample of a batch).
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        for (k, g) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.leaves.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.params.values_mut().chain(self.leaves.values_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Reverse pass from a scalar root with seed gradient 1.
pub fn backward(root: &Var) -> Gradients {
    let mut out = Gradients::default();
    if !root.requires_grad() {
        return out;
    }
    // Iterative post-order DFS gives a topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<*const Node, ()> = HashMap::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if visited.insert(v.key(), ()).is_some() {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.0.parents.iter().rev() {
            if p.requires_grad() && !visited.contains_key(&p.key()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
    grads.insert(root.key(), Tensor::full(root.shape().to_vec(), 1.0));
    for v in order.iter().rev() {
        let Some(g) = grads.remove(&v.key()) else { continue };
        let node = &v.0;
        match (&node.backward, node.param) {
            (Some(f), _) => {
                let parent_grads = f(&g, &node.parents);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                    match grads.get_mut(&p.key()) {
                        Some(acc) => acc.add_assign(&pg),
                        None => {
                            grads.insert(p.key(), pg);
                        }
                    }
                }
            }
            (None, Some(id)) => match out.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.params.insert(id, g);
                }
            },
            (None, None) => {
                out.leaves.insert(v.key(), g);
            }
        }
    }
    out
}
