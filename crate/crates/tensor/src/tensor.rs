//! Tensor values and the reverse-mode autodiff tape.
//!
//! Every op result keeps references to its parents plus a closure producing
//! parent gradients. Backward closures are themselves written in terms of
//! tape ops, so calling [`Tensor::backward`] with `create_graph = true`
//! yields gradients that are differentiable again (needed for gradient
//! penalties and for verifying them by finite differences).

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// True while ops should record backward closures.
pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Run `f` without recording the tape (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_recording(false, f)
}

pub(crate) fn with_recording<R>(on: bool, f: impl FnOnce() -> R) -> R {
    RECORDING.with(|r| {
        let prev = r.get();
        r.set(on);
        let out = f();
        r.set(prev);
        out
    })
}

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>>>;

pub(crate) struct Node<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// A reference-counted n-dimensional array participating in the autodiff
/// graph. Cloning is shallow.
pub struct Tensor<E: Scalar> {
    node: Rc<Node<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.data();
        let preview: Vec<&E> = data.iter().take(8).collect();
        write!(
            f,
            "Tensor{:?}{:?}{}",
            self.shape(),
            preview,
            if data.len() > 8 { "..." } else { "" }
        )
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![E::one(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::from_vec(vec![v; shape.iter().product()], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    /// Mark a leaf tensor as trainable. Panics on non-leaf tensors.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.node.parents.is_empty() && self.node.backward.is_none(),
            "requires_grad can only be set on leaf tensors"
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.node.shape.clone(),
                data: RefCell::new(self.node.data.borrow().clone()),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let record = is_recording() && parents.iter().any(|p| p.node.requires_grad);
        if record {
            Tensor {
                node: Rc::new(Node {
                    id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                    shape,
                    data: RefCell::new(data),
                    requires_grad: true,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::from_vec(data, &shape)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.borrow().clone()
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Overwrite the values of a leaf tensor (optimizer updates, finite
    /// differences). Any graph recorded against the old values is stale
    /// afterwards; callers rebuild the graph per step.
    pub fn set_data(&self, values: &[E]) {
        assert_eq!(values.len(), self.len());
        self.node.data.borrow_mut().copy_from_slice(values);
    }

    /// Apply `f` in place to a leaf tensor's buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.node.data.borrow_mut());
    }

    /// A constant leaf sharing no graph history with `self`.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_vec(self.to_vec(), &self.node.shape)
    }

    /// Reverse-mode differentiation from a scalar output.
    ///
    /// With `create_graph` the returned gradients are tape nodes that can be
    /// differentiated again.
    pub fn backward(&self, create_graph: bool) -> Gradients<E> {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        let mut topo: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative DFS; graphs can be deep.
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains(&t.node.id) || !t.node.requires_grad {
                    continue;
                }
                visited.insert(t.node.id);
            }
            if child_idx < t.node.parents.len() {
                let parent = t.node.parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if !visited.contains(&parent.node.id) && parent.node.requires_grad {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Tensor<E>> = HashMap::new();
        grads.insert(self.node.id, Tensor::ones(&[1]));
        with_recording(create_graph, || {
            for t in topo.iter().rev() {
                let Some(grad_out) = grads.get(&t.node.id).cloned() else {
                    continue;
                };
                let Some(backward) = &t.node.backward else {
                    continue;
                };
                let parent_grads = backward(&grad_out);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                    match grads.remove(&parent.node.id) {
                        Some(existing) => {
                            grads.insert(parent.node.id, crate::ops::add(&existing, &pg));
                        }
                        None => {
                            grads.insert(parent.node.id, pg);
                        }
                    }
                }
            }
        });
        Gradients { map: grads }
    }
}

/// Result of a backward pass: gradients keyed by tensor id.
pub struct Gradients<E: Scalar> {
    map: HashMap<u64, Tensor<E>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn grad(&self, t: &Tensor<E>) -> Option<&Tensor<E>> {
        self.map.get(&t.node.id)
    }

    pub fn contains(&self, t: &Tensor<E>) -> bool {
        self.map.contains_key(&t.node.id)
    }
}
