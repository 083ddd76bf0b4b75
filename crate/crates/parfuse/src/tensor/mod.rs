//! Dense f64 tensor engine with reverse-mode autodiff.
//!
//! Tensors are row-major, immutable after construction, and share storage via
//! `Rc`. Gradient tracking is opt-in and scoped: ops record backward closures
//! on a [`Tape`] only when at least one input is attached to one, so
//! forward-only inference never allocates tape state. Feature maps follow the
//! NHWC layout `[batch, height, width, channels]`.

mod checkpoint;
pub mod nn;
mod ops;
mod optim;
pub(crate) mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorRecord};
pub use optim::{AdamW, LrSchedule};
pub use tape::{Gradients, Tape};

use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) use tape::TapeNode;

/// Dense N-dimensional array of f64 values, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<TapeNode>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("taped", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::usage("tensor shape overflows element count"))
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::usage(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: Rc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = element_count(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: Rc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Extracts the value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Whether this tensor participates in gradient recording.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors out if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!(
                "non-finite value in {context} (shape {:?})",
                self.shape
            )))
        }
    }

    /// Detaches from any tape, keeping the same storage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&TapeNode> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Rc<Vec<f64>>, node: Option<TapeNode>) -> Self {
        Tensor { shape, data, node }
    }

    pub(crate) fn share_data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }
}
