//! A small define-by-run reverse-mode autodiff engine over `f64` NCHW arrays.
//!
//! Every operation produces a [`Var`] that owns its value and, when gradient
//! tracking is enabled, a reference to its inputs plus a backward closure.
//! Graph nodes are reference counted, so under [`no_grad`] intermediates are
//! released as soon as the caller drops them.

mod conv;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;

pub use conv::conv2d;
pub use ops::{
    add, avg_pool2, batch_norm_eval, batch_norm_train, concat_channels, max_pool2, relu,
    sigmoid, upsample_bilinear2, upsample_nearest2, weighted_sum, BatchStats,
};

/// Dense `f64` array used for every tensor in the engine.
pub type Array = ArrayD<f64>;

/// Computes gradients for each parent from the output gradient.
///
/// Arguments are the gradient w.r.t. the output, the parents, and the output value.
pub(crate) type BackwardFn = Box<dyn Fn(&Array, &[Var], &Array) -> Vec<Option<Array>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Disables graph recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Turns off gradient tracking for the current thread.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: u64,
    value: Array,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    leaf_tag: Option<usize>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("tracked", &self.requires_grad())
            .finish()
    }
}

impl Var {
    fn new(
        value: Array,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        leaf_tag: Option<usize>,
    ) -> Self {
        // ops index raw slices, so every stored value is kept in standard layout
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents,
            backward,
            leaf_tag,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Array) -> Self {
        Self::new(value, Vec::new(), None, None)
    }

    /// A tracked leaf. Its gradient is reported under `tag` by [`Var::backward`].
    /// Outside of gradient mode this is the same as [`Var::constant`].
    pub fn leaf(value: Array, tag: usize) -> Self {
        if grad_enabled() {
            Self::new(value, Vec::new(), None, Some(tag))
        } else {
            Self::constant(value)
        }
    }

    pub(crate) fn from_op(value: Array, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if grad_enabled() && parents.iter().any(Var::requires_grad) {
            Self::new(value, parents, Some(backward), None)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.leaf_tag.is_some() || self.0.backward.is_some()
    }

    /// Returns the value detached from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Back-propagates from this scalar node, returning gradients keyed by leaf tag.
    ///
    /// Panics if the node does not hold exactly one element.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.0.value.len(), 1, "backward() needs a scalar output");
        let order = self.topological_order();
        let mut pending: HashMap<u64, Array> = HashMap::new();
        pending.insert(self.0.id, Array::ones(self.0.value.raw_dim()));
        let mut out = Gradients::default();

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(tag) = node.0.leaf_tag {
                out.accumulate(tag, grad);
                continue;
            }
            let Some(backward) = &node.0.backward else {
                continue;
            };
            let parent_grads = backward(&grad, &node.0.parents, &node.0.value);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), parent.shape());
                match pending.get_mut(&parent.0.id) {
                    Some(acc) => *acc += &g,
                    None => {
                        pending.insert(parent.0.id, g);
                    }
                }
            }
        }
        out
    }

    /// Nodes reachable from `self` that carry gradient, in topological order.
    fn topological_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !node.requires_grad() || !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by a backward pass.
#[derive(Default, Debug)]
pub struct Gradients {
    by_tag: HashMap<usize, Array>,
}

impl Gradients {
    fn accumulate(&mut self, tag: usize, grad: Array) {
        match self.by_tag.get_mut(&tag) {
            Some(acc) => *acc += &grad,
            None => {
                self.by_tag.insert(tag, grad);
            }
        }
    }

    pub fn get(&self, tag: usize) -> Option<&Array> {
        self.by_tag.get(&tag)
    }

    pub fn len(&self) -> usize {
        self.by_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tag.is_empty()
    }
}
