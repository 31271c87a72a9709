use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::tape::{self, OpCtx};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A dense row-major float64 tensor.
///
/// `Tensor` is a cheap handle (`Arc` inside): clones share storage. Values are
/// immutable once created, with two deliberate exceptions that keep training
/// loops simple: an optimizer may overwrite a *leaf* tensor's data in place
/// via [`Tensor::set_data`], and `backward` accumulates into leaf gradient
/// slots. Handles are `Send + Sync`; the recording tape is not (see
/// [`crate::tape::Tape`]).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    /// Participates in differentiation. For leaves this marks a trainable
    /// parameter; for op outputs it means "recorded on the active tape".
    requires_grad: bool,
    /// Created directly (not as an op output). Only leaves own a gradient
    /// slot; intermediate gradients live inside a single backward pass.
    leaf: bool,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Read guard over a tensor's storage, dereferencing to `&[f64]`.
pub struct Data<'a>(RwLockReadGuard<'a, Vec<f64>>);

impl std::ops::Deref for Data<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, leaf: bool) -> Tensor {
        debug_assert_eq!(element_count(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                leaf,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Constant leaf tensor from row-major data.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if element_count(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, element_count(&shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::new(shape, data, false, true))
    }

    /// Trainable leaf tensor (gradient slot populated by `backward`).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: t.inner.shape.clone(),
                data: RwLock::new(t.to_vec()),
                requires_grad: true,
                leaf: true,
                grad: Mutex::new(None),
            }),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = element_count(&shape);
        Tensor::new(shape, vec![0.0; n], false, true)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let n = element_count(&shape);
        Tensor::new(shape, vec![value; n], false, true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(Vec::new(), vec![value], false, true)
    }

    /// Output of a differentiable operator.
    ///
    /// Validates that `data` is finite and matches `shape`, then — when a tape
    /// is recording and some input requires a gradient — records a node whose
    /// `backward` maps the output gradient to per-input gradients (`None` for
    /// inputs that need none). This is the single extension point custom
    /// operators in downstream crates build on.
    pub fn from_op<F>(
        op: &'static str,
        inputs: &[&Tensor],
        shape: impl Into<Vec<usize>>,
        data: Vec<f64>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&OpCtx) -> Result<Vec<Option<Vec<f64>>>> + 'static,
    {
        let shape = shape.into();
        if element_count(&shape) != data.len() {
            return Err(Error::shape(
                op,
                format!("op produced {} elements for shape {:?}", data.len(), shape),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let record = tape::is_recording() && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::new(shape, data, record, false);
        if record {
            tape::record(op, inputs, &out, Box::new(backward));
        }
        Ok(out)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    /// Total element count (1 for rank-0 scalars).
    pub fn len(&self) -> usize {
        element_count(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    /// Borrow the storage for reading.
    pub fn data(&self) -> Data<'_> {
        Data(self.inner.data.read().expect("tensor storage poisoned"))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Element at a full row-major index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.ndim(), "at: index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "at: index {ix} out of bounds for axis {i} (len {dim})");
            flat = flat * dim + ix;
        }
        self.data()[flat]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::shape("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    /// Overwrite a leaf tensor's values in place (optimizer updates).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.inner.leaf {
            return Err(Error::invalid("set_data", "only leaf tensors may be overwritten"));
        }
        let mut guard = self.inner.data.write().expect("tensor storage poisoned");
        if guard.len() != values.len() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} elements, got {}", guard.len(), values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "set_data" });
        }
        guard.copy_from_slice(values);
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad slot poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad slot poisoned") = None;
    }

    /// Add `delta` into the leaf gradient slot.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert!(self.inner.leaf && self.inner.requires_grad);
        let mut slot = self.inner.grad.lock().expect("grad slot poisoned");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Same storage viewed as a constant (drops tape participation).
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.shape.clone(), self.to_vec(), false, true)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.inner.leaf)
            .finish()
    }
}
