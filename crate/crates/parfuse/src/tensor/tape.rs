//! Wengert-list tape for reverse-mode differentiation.
//!
//! Ops append one node per output tensor; each node owns a backward closure
//! that scatters the incoming gradient onto its input nodes. Nodes are created
//! in topological (execution) order, so a single reverse sweep suffices.
//! The tape is single-threaded by contract and is consumed by `backward`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct NodeRecord {
    len: usize,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    nodes: Vec<NodeRecord>,
    leaf_ids: HashMap<u64, usize>,
    spent: bool,
}

/// Handle tying a tensor to its tape entry.
#[derive(Clone)]
pub(crate) struct TapeNode {
    pub(crate) tape: Rc<RefCell<TapeInner>>,
    pub(crate) id: usize,
}

/// Explicit, scoped gradient recorder. Create one per training step; drop it
/// (or run [`Tape::backward`]) to release all recorded state.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner::default())),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers (or returns) the leaf node for a parameter, keyed by the
    /// parameter's unique id so repeated uses share one node.
    pub(crate) fn leaf(&self, uid: u64, tensor_len: usize) -> TapeNode {
        let mut inner = self.inner.borrow_mut();
        if let Some(&id) = inner.leaf_ids.get(&uid) {
            return TapeNode {
                tape: Rc::clone(&self.inner),
                id,
            };
        }
        let id = inner.nodes.len();
        inner.nodes.push(NodeRecord {
            len: tensor_len,
            backward: None,
        });
        inner.leaf_ids.insert(uid, id);
        TapeNode {
            tape: Rc::clone(&self.inner),
            id,
        }
    }

    pub(crate) fn leaf_node_id(&self, uid: u64) -> Option<usize> {
        self.inner.borrow().leaf_ids.get(&uid).copied()
    }

    /// Runs the reverse sweep from a scalar loss. Consumes the recorded nodes;
    /// the tape cannot be reused afterwards.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = loss
            .node()
            .ok_or_else(|| Error::usage("backward on a tensor with no tape"))?;
        if !Rc::ptr_eq(&node.tape, &self.inner) {
            return Err(Error::usage("loss was recorded on a different tape"));
        }
        let (nodes, loss_id) = {
            let mut inner = self.inner.borrow_mut();
            if inner.spent {
                return Err(Error::usage("tape already consumed by backward"));
            }
            inner.spent = true;
            (std::mem::take(&mut inner.nodes), node.id)
        };

        let lens: Vec<usize> = nodes.iter().map(|n| n.len).collect();
        let mut bufs: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        bufs[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if bufs[id].is_none() {
                continue;
            }
            if let Some(backward) = &nodes[id].backward {
                let grad = bufs[id].take().expect("checked above");
                let mut sink = GradSink {
                    bufs: &mut bufs,
                    lens: &lens,
                };
                backward(&grad, &mut sink);
            }
        }

        Ok(Gradients { bufs })
    }
}

/// Accumulator handed to backward closures.
pub(crate) struct GradSink<'a> {
    bufs: &'a mut Vec<Option<Vec<f64>>>,
    lens: &'a [usize],
}

impl GradSink<'_> {
    /// Applies `add` to the (lazily zero-initialized) gradient buffer of a node.
    pub(crate) fn accumulate(&mut self, node_id: usize, add: impl FnOnce(&mut [f64])) {
        let buf = self.bufs[node_id].get_or_insert_with(|| vec![0.0; self.lens[node_id]]);
        add(buf);
    }
}

/// Result of a reverse sweep: per-node gradient buffers.
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub(crate) fn by_node(&self, node_id: usize) -> Option<&[f64]> {
        self.bufs.get(node_id).and_then(|b| b.as_deref())
    }
}

/// Verifies that all taped inputs share one tape and returns it.
pub(crate) fn common_tape(inputs: &[&Tensor]) -> Result<Option<Rc<RefCell<TapeInner>>>> {
    let mut found: Option<Rc<RefCell<TapeInner>>> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(Rc::clone(&node.tape)),
                Some(existing) => {
                    if !Rc::ptr_eq(existing, &node.tape) {
                        return Err(Error::usage("operands belong to different tapes"));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Attaches a freshly computed output to the tape with the given backward
/// closure. `tape` comes from [`common_tape`]; `None` leaves the output
/// untracked.
pub(crate) fn attach(
    tape: Option<Rc<RefCell<TapeInner>>>,
    out: &mut Tensor,
    backward: impl Fn(&[f64], &mut GradSink) + 'static,
) {
    if let Some(tape) = tape {
        let id = {
            let mut inner = tape.borrow_mut();
            let id = inner.nodes.len();
            inner.nodes.push(NodeRecord {
                len: out.len(),
                backward: Some(Box::new(backward)),
            });
            id
        };
        out.node = Some(TapeNode { tape, id });
    }
}

/// Node id of a tensor, if taped.
pub(crate) fn node_id(t: &Tensor) -> Option<usize> {
    t.node().map(|n| n.id)
}
