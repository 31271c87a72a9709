use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Context handed to an operator's backward function.
pub struct OpCtx<'a> {
    /// Gradient of the loss with respect to the operator's output.
    pub grad: &'a [f64],
    /// The operator's inputs, in the order passed to `from_op`.
    pub inputs: &'a [Tensor],
    /// The operator's output (forward values often reused by backward).
    pub output: &'a Tensor,
}

pub(crate) type BackwardFn = Box<dyn Fn(&OpCtx) -> Result<Vec<Option<Vec<f64>>>>>;

struct Node {
    op: &'static str,
    output: Tensor,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

/// Wengert list recording the forward pass for reverse-mode differentiation.
///
/// Operators append nodes in execution order while a [`Tape::recording`]
/// guard is alive on the current thread, which makes the list topologically
/// sorted by construction: a node's inputs always precede it. `backward`
/// walks the list once in reverse.
///
/// A tape is deliberately *not* `Send`: recording is confined to one thread.
/// Tensors themselves remain freely shareable across threads.
pub struct Tape {
    inner: Rc<TapeInner>,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    last_visits: Cell<usize>,
}

thread_local! {
    static ACTIVE: RefCell<Vec<Rc<TapeInner>>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn is_recording() -> bool {
    ACTIVE.with(|stack| !stack.borrow().is_empty())
}

pub(crate) fn record(op: &'static str, inputs: &[&Tensor], output: &Tensor, backward: BackwardFn) {
    ACTIVE.with(|stack| {
        let stack = stack.borrow();
        let tape = stack.last().expect("record called with no active tape");
        tape.nodes.borrow_mut().push(Node {
            op,
            output: output.clone(),
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            backward,
        });
    });
}

/// Keeps a tape active for the current thread; recording stops on drop.
pub struct RecordingGuard<'a> {
    tape: &'a Tape,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        ACTIVE.with(|stack| {
            let popped = stack.borrow_mut().pop().expect("tape guard stack underflow");
            debug_assert!(Rc::ptr_eq(&popped, &self.tape.inner), "tape guards dropped out of order");
        });
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(TapeInner::default()) }
    }

    /// Start recording operators executed on this thread onto this tape.
    #[must_use = "recording stops when the guard is dropped"]
    pub fn recording(&self) -> RecordingGuard<'_> {
        ACTIVE.with(|stack| stack.borrow_mut().push(Rc::clone(&self.inner)));
        RecordingGuard { tape: self }
    }

    /// Number of recorded operator nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes visited by the most recent `backward` (exactly `len()` afterwards).
    pub fn last_backward_visits(&self) -> usize {
        self.inner.last_visits.get()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of intermediate values live only inside this call; every
    /// `requires_grad` *leaf* reached from the loss has its gradient slot
    /// accumulated. Calling `backward` again without `zero_grad` adds another
    /// full gradient on top (deliberate, for gradient accumulation).
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        if !loss.requires_grad() {
            return Err(Error::Invalid {
                op: "backward",
                msg: "loss is not connected to any recorded operation".into(),
            });
        }
        if loss.is_leaf() {
            // Degenerate but well-defined: d(loss)/d(loss) = 1.
            loss.accumulate_grad(&[1.0]);
            self.inner.last_visits.set(0);
            return Ok(());
        }

        // Gradients of op outputs, keyed by tensor id. Leaf gradients go
        // straight into their slots instead.
        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(loss.id(), vec![1.0]);

        let nodes = self.inner.nodes.borrow();
        let mut visits = 0usize;
        for node in nodes.iter().rev() {
            visits += 1;
            let Some(grad_out) = flowing.remove(&node.output.id()) else {
                continue; // not on the path from the loss
            };
            let ctx = OpCtx { grad: &grad_out, inputs: &node.inputs, output: &node.output };
            let grads = (node.backward)(&ctx)?;
            if grads.len() != node.inputs.len() {
                return Err(Error::Invalid {
                    op: node.op,
                    msg: format!(
                        "backward returned {} gradients for {} inputs",
                        grads.len(),
                        node.inputs.len()
                    ),
                });
            }
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if grad.len() != input.len() {
                    return Err(Error::Invalid {
                        op: node.op,
                        msg: format!(
                            "backward produced {} elements for input of {}",
                            grad.len(),
                            input.len()
                        ),
                    });
                }
                if input.is_leaf() {
                    input.accumulate_grad(&grad);
                } else {
                    match flowing.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&grad) {
                                *a += b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(grad);
                        }
                    }
                }
            }
        }
        self.inner.last_visits.set(visits);
        Ok(())
    }
}
