//! Reverse-mode differentiation on a linear tape.
//!
//! Every operation whose inputs include at least one tracked [`Var`] appends an
//! entry to the shared [`Tape`]. Entries hold the tensors their backward pass
//! needs, so a tape lives exactly as long as one forward/backward iteration.
//! Operations on untracked values record nothing and keep no intermediates.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Backward function of one recorded op: receives the output gradient and a
/// per-input flag telling whether that input needs a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Entry<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T> {
    entries: RefCell<Vec<Entry<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Rc<Self> {
        Rc::new(Self {
            entries: RefCell::new(Vec::new()),
        })
    }

    /// Registers `value` as a leaf whose gradient will be reported by
    /// [`Var::backward`].
    pub fn leaf(self: &Rc<Self>, value: Tensor<T>) -> Var<T> {
        let index = self.push(Entry {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value: Rc::new(value),
            node: Some(Node {
                tape: Rc::clone(self),
                index,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, entry: Entry<T>) -> usize {
        let mut entries = self.entries.borrow_mut();
        entries.push(entry);
        entries.len() - 1
    }
}

#[derive(Clone)]
struct Node<T> {
    tape: Rc<Tape<T>>,
    index: usize,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<Node<T>>,
}

impl<T: Real> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Shared handle to the value, for backward closures that need it.
    pub fn shared_value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// Records a custom differentiable op.
    ///
    /// `backward` must return one entry per input, in input order. It is only
    /// stored when at least one input is tracked.
    pub fn from_op(inputs: &[&Var<T>], value: Tensor<T>, backward: BackwardFn<T>) -> Self {
        let tape = inputs
            .iter()
            .find_map(|v| v.node.as_ref().map(|n| Rc::clone(&n.tape)));
        let Some(tape) = tape else {
            return Self::constant(value);
        };
        let parents = inputs
            .iter()
            .map(|v| {
                v.node.as_ref().map(|n| {
                    debug_assert!(Rc::ptr_eq(&n.tape, &tape), "vars from different tapes");
                    n.index
                })
            })
            .collect();
        let index = tape.push(Entry {
            parents,
            backward: Some(backward),
        });
        Self {
            value: Rc::new(value),
            node: Some(Node { tape, index }),
        }
    }

    /// Back-propagates from this scalar and returns the gradients of every
    /// leaf that contributed to it.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let node = self.node.as_ref().ok_or(TensorError::Untracked)?;
        let entries = node.tape.entries.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=node.index).map(|_| None).collect();
        grads[node.index] = Some(Tensor::full(self.shape(), T::one()));
        for i in (0..=node.index).rev() {
            let entry = &entries[i];
            let Some(backward) = &entry.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = entry.parents.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), entry.parents.len());
            for (parent, ig) in entry.parents.iter().zip(input_grads) {
                if let (Some(p), Some(ig)) = (parent, ig) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients {
            tape: Rc::clone(&node.tape),
            grads,
        })
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients<T> {
    tape: Rc<Tape<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` when it did not influence the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let node = var.node.as_ref()?;
        if !Rc::ptr_eq(&node.tape, &self.tape) {
            return None;
        }
        self.grads.get(node.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        let node = var.node.as_ref()?;
        if !Rc::ptr_eq(&node.tape, &self.tape) {
            return None;
        }
        self.grads.get_mut(node.index).and_then(Option::take)
    }
}
