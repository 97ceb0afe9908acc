//! The autodiff tape: values, nodes and the backward pass.

use ndarray::ArrayD;

/// Handle to a value on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type GradFn = Box<dyn Fn(&Graph, &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
}

/// Append-only computation tape.
///
/// In recording mode every op stores a gradient closure so [`Graph::backward`]
/// can replay the tape in reverse. In inference mode the closures are dropped
/// at insertion and `backward` must not be called.
pub struct Graph {
    vals: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
    recording: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
///
/// A `None` entry means the variable did not contribute to the loss; callers
/// treat it as a zero gradient.
pub struct Grads {
    by_var: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new(recording: bool) -> Self {
        Graph { vals: Vec::new(), nodes: Vec::new(), recording }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    /// Adds a leaf value (input tensor or parameter snapshot).
    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val, Vec::new(), None)
    }

    /// Adds a computed value. `grad_fn` receives the gradient flowing into
    /// this node and must return one gradient per parent, in parent order.
    ///
    /// Values are normalized to standard layout so every op may assume
    /// contiguous inputs.
    pub(crate) fn push(
        &mut self,
        val: ArrayD<f64>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
    ) -> Var {
        let id = self.vals.len();
        let val =
            if val.as_slice().is_some() { val } else { val.as_standard_layout().into_owned() };
        self.vals.push(val);
        if self.recording {
            self.nodes.push(Node { parents, grad_fn });
        } else {
            self.nodes.push(Node { parents: Vec::new(), grad_fn: None });
        }
        Var(id)
    }

    pub fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    /// Scalar accessor for 0-dimensional values such as losses.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        assert!(a.len() == 1, "scalar() on tensor of {} elements", a.len());
        *a.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Reverse pass seeded with `d root / d root = 1`.
    ///
    /// Nodes are visited in descending id order, which is a valid reverse
    /// topological order for an append-only tape.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(self.recording, "backward on a non-recording graph");
        let mut by_var: Vec<Option<ArrayD<f64>>> = vec![None; self.vals.len()];
        by_var[root.0] = Some(ArrayD::ones(self.vals[root.0].raw_dim()));
        for id in (0..=root.0).rev() {
            let Some(grad) = by_var[id].as_ref() else { continue };
            let node = &self.nodes[id];
            let Some(grad_fn) = node.grad_fn.as_ref() else { continue };
            let parent_grads = grad_fn(self, grad);
            assert_eq!(
                parent_grads.len(),
                node.parents.len(),
                "grad_fn returned wrong arity"
            );
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                assert_eq!(
                    pg.shape(),
                    self.vals[pid].shape(),
                    "gradient shape mismatch for parent {pid}"
                );
                let pg =
                    if pg.as_slice().is_some() { pg } else { pg.as_standard_layout().into_owned() };
                match &mut by_var[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { by_var }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_over_reused_nodes() {
        let mut g = Graph::new(true);
        let x = g.leaf(arr1(&[2.0, -3.0]).into_dyn());
        let y = ops::add(&mut g, x, x);
        let s = ops::sum_all(&mut g, y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx, &arr1(&[2.0, 2.0]).into_dyn());
    }

    #[test]
    fn unreached_leaves_have_no_gradient() {
        let mut g = Graph::new(true);
        let x = g.leaf(arr1(&[1.0]).into_dyn());
        let unused = g.leaf(arr1(&[5.0]).into_dyn());
        let s = ops::sum_all(&mut g, x);
        let grads = g.backward(s);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    #[should_panic(expected = "non-recording")]
    fn backward_requires_recording() {
        let mut g = Graph::new(false);
        let x = g.leaf(arr1(&[1.0]).into_dyn());
        let s = ops::sum_all(&mut g, x);
        g.backward(s);
    }
}
