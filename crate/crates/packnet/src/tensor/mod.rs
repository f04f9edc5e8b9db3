//! Reverse-mode autodiff over dynamically shaped CPU arrays.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] replays
//! them in reverse to accumulate gradients. Tensors are cheap handles
//! (`Rc<ArrayD<T>>` plus an optional tape node), so cloning never copies
//! array data. Everything is generic over [`Element`] so the same code runs
//! in `f32` for training throughput and in `f64` for finite-difference
//! gradient verification.

mod conv;
mod gradcheck;
mod ops;
mod tape;

pub use conv::avg_pool2;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Gradients, Tape};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

/// Scalar element type the engine can run on.
pub trait Element: ndarray::NdFloat + 'static {
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn write_le(vals: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Option<Vec<Self>>;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn write_le(vals: &[Self], out: &mut Vec<u8>) {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        )
    }
}

/// Handle to a value living on (or alongside) a tape.
///
/// `node == None` means the value is a constant: gradients do not flow
/// through it and the tape retains nothing for it.
pub struct Tensor<T> {
    data: Rc<ArrayD<T>>,
    node: Option<usize>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            data: Rc::clone(&self.data),
            node: self.node,
        }
    }
}

impl<T: Element> Tensor<T> {
    pub(crate) fn new(data: ArrayD<T>, node: Option<usize>) -> Self {
        Tensor {
            data: Rc::new(data),
            node,
        }
    }

    pub(crate) fn from_rc(data: Rc<ArrayD<T>>, node: Option<usize>) -> Self {
        Tensor { data, node }
    }

    pub fn array(&self) -> &ArrayD<T> {
        &self.data
    }

    pub(crate) fn share(&self) -> Rc<ArrayD<T>> {
        Rc::clone(&self.data)
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    /// Same values, detached from the tape.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a zero-dimensional (scalar) tensor.
    pub fn scalar(&self) -> T {
        debug_assert!(
            self.data.len() == 1,
            "scalar() on tensor of shape {:?}",
            self.shape()
        );
        *self.data.iter().next().expect("empty tensor")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Scalar constant as a 0-d array.
pub fn scalar_array<T: Element>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A named learnable parameter.
///
/// The value is shared copy-on-write with the tapes that reference it, so
/// binding parameters to a training step is free and the optimizer mutates
/// in place once the step's tape is gone.
pub struct Param<T> {
    id: u64,
    name: String,
    value: RefCell<Rc<ArrayD<T>>>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value: RefCell::new(Rc::new(value)),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Rc<ArrayD<T>> {
        Rc::clone(&self.value.borrow())
    }

    /// Replace the stored value (shape must match).
    pub fn set(&self, value: ArrayD<T>) {
        assert_eq!(
            self.value.borrow().shape(),
            value.shape(),
            "param {} shape changed",
            self.name
        );
        *self.value.borrow_mut() = Rc::new(value);
    }

    /// Mutate the value in place; clones only if a tape still holds it.
    pub fn update<F: FnOnce(&mut ArrayD<T>)>(&self, f: F) {
        let mut slot = self.value.borrow_mut();
        f(Rc::make_mut(&mut slot));
    }
}

impl<T: Element> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", &self.shape())
            .finish()
    }
}
