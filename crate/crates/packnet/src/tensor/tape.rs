use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::ArrayD;

use super::{Element, Param, Tensor};

/// Gradient contributions for the logical inputs of one recorded op.
///
/// `need[i]` tells the closure whether input `i` is tracked; untracked slots
/// may be skipped and returned as `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[bool]) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    /// Tape node id per logical input; `None` for constants.
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Records the forward computation for reverse-mode differentiation.
///
/// Create one tape per training step. A disabled tape (`Tape::no_grad`)
/// computes values only and retains nothing.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    enabled: Cell<bool>,
    param_nodes: RefCell<HashMap<u64, usize>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: Cell::new(true),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    /// A tape that never records; forward passes through it keep no state.
    pub fn no_grad() -> Self {
        let t = Self::new();
        t.enabled.set(false);
        t
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wrap a value that gradients never flow through.
    pub fn constant(&self, data: ArrayD<T>) -> Tensor<T> {
        Tensor::new(data, None)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(super::scalar_array(v))
    }

    /// A tracked input: gradients accumulate here and survive `backward`.
    pub fn leaf(&self, data: ArrayD<T>) -> Tensor<T> {
        self.leaf_shared(Rc::new(data))
    }

    fn leaf_shared(&self, data: Rc<ArrayD<T>>) -> Tensor<T> {
        if !self.enabled.get() {
            return Tensor::from_rc(data, None);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Tensor::from_rc(data, Some(nodes.len() - 1))
    }

    /// Bind a parameter to this tape, reusing the node if already bound.
    pub fn param(&self, p: &Param<T>) -> Tensor<T> {
        if !self.enabled.get() {
            return Tensor::from_rc(p.value(), None);
        }
        if let Some(&node) = self.param_nodes.borrow().get(&p.id()) {
            return Tensor::from_rc(p.value(), Some(node));
        }
        let t = self.leaf_shared(p.value());
        self.param_nodes
            .borrow_mut()
            .insert(p.id(), t.node().expect("leaf is tracked"));
        t
    }

    /// Record an op. `parents` are the node ids of the logical inputs.
    pub(crate) fn record(
        &self,
        data: ArrayD<T>,
        parents: Vec<Option<usize>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        if !self.enabled.get() || parents.iter().all(|p| p.is_none()) {
            return Tensor::new(data, None);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(backward),
        });
        Tensor::new(data, Some(nodes.len() - 1))
    }

    /// Accumulate gradients of a scalar loss with respect to every tracked
    /// leaf reachable from it.
    pub fn backward(&self, loss: &Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        let root = loss
            .node()
            .expect("backward() on a constant: nothing is tracked");
        assert!(
            loss.array().len() == 1,
            "backward() requires a scalar loss, got shape {:?}",
            loss.shape()
        );
        grads[root] = Some(ArrayD::from_elem(loss.array().raw_dim(), T::one()));

        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = &node.backward else {
                continue; // leaf: keep its gradient
            };
            let grad_out = grads[id].take().expect("checked above");
            let need: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let contribs = back(&grad_out, &need);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let (Some(pid), Some(c)) = (node.parents[slot], contrib) else {
                    continue;
                };
                match &mut grads[pid] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }

        Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.borrow().clone(),
        }
    }
}

/// Result of [`Tape::backward`]: gradients keyed by leaf node.
pub struct Gradients<T> {
    by_node: Vec<Option<ArrayD<T>>>,
    param_nodes: HashMap<u64, usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a tracked tensor (typically a leaf).
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&ArrayD<T>> {
        t.node().and_then(|n| self.by_node.get(n)?.as_ref())
    }

    /// Gradient with respect to a bound parameter.
    pub fn param(&self, p: &Param<T>) -> Option<&ArrayD<T>> {
        let node = *self.param_nodes.get(&p.id())?;
        self.by_node.get(node)?.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_through_simple_chain() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let y = tape.mul(&x, &x); // x^2
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss);
        let gx = grads.wrt(&x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.constant(arr1(&[3.0, 4.0]).into_dyn());
        let c = tape.mul(&a, &b);
        assert!(c.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn disabled_tape_records_nothing() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = tape.mul(&x, &x);
        assert!(x.node().is_none() && y.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn param_bound_once_per_tape() {
        let p = Param::new("w", arr1(&[2.0f64]).into_dyn());
        let tape = Tape::<f64>::new();
        let w1 = tape.param(&p);
        let w2 = tape.param(&p);
        assert_eq!(w1.node(), w2.node());
        // grad accumulates across both uses: d(w*w)/dw = 2w = 4
        let prod = tape.mul(&w1, &w2);
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss);
        assert_eq!(grads.param(&p).unwrap()[[0]], 4.0);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[3.0]).into_dyn());
        let y = tape.mul(&x.detach(), &x); // treated as c*x
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap()[[0]], 3.0);
    }
}
