//! Recording tape for reverse-mode automatic differentiation.
//!
//! Each thread owns one tape. Operations on tracked tensors push a node whose
//! backward closure knows how to route an incoming gradient to the node's
//! parents; creation order is a valid topological order, so `backward` is a
//! single reverse sweep over node ids. Clearing the tape bumps an epoch
//! counter so tensors recorded on a stale tape are detected instead of
//! silently aliasing new nodes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::param::ParamSlot;

/// Identifies a node on the thread's tape, pinned to a tape epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) epoch: u64,
    pub(crate) id: usize,
}

/// Backward closure: receives the output gradient and accumulates into parent
/// buffers through [`PassGrads`].
pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut PassGrads)>;

pub(crate) struct Node {
    backward: Option<BackFn>,
    /// Persistent gradient accumulator (grows across repeated backward calls).
    grad: Option<Vec<f64>>,
    numel: usize,
    /// For parameter leaves: where to deposit the gradient after the sweep.
    sink: Option<Rc<ParamSlot>>,
}

/// Per-sweep gradient propagation buffers, indexed by node id.
pub(crate) struct PassGrads {
    bufs: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl PassGrads {
    /// Mutable gradient buffer for `id`, allocated on first touch.
    pub(crate) fn buf(&mut self, id: usize) -> &mut [f64] {
        let numel = self.numels[id];
        self.bufs[id].get_or_insert_with(|| vec![0.0; numel])
    }
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
    epoch: u64,
}

/// Epochs are process-unique so a NodeRef can never alias a node on a
/// different tape, including the temporary tapes of [`with_fresh_tape`].
fn next_epoch() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl Tape {
    fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            epoch: next_epoch(),
        }
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::new());
}

/// Drop all recorded nodes and invalidate outstanding [`NodeRef`]s.
pub fn clear_tape() {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        tape.nodes.clear();
        tape.epoch = next_epoch();
    });
}

/// Number of nodes currently recorded (diagnostics / state-size tests).
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

/// Run `f` against a fresh, empty tape, restoring the previous tape after.
/// The gradient checker uses this so probe evaluations cannot interfere with
/// an enclosing recording.
pub fn with_fresh_tape<R>(f: impl FnOnce() -> R) -> R {
    let saved = TAPE.with(|t| std::mem::replace(&mut *t.borrow_mut(), Tape::new()));
    let out = f();
    TAPE.with(|t| *t.borrow_mut() = saved);
    out
}

pub(crate) fn record(numel: usize, backward: BackFn, sink: Option<Rc<ParamSlot>>) -> NodeRef {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            backward: Some(backward),
            grad: None,
            numel,
            sink,
        });
        NodeRef {
            epoch: tape.epoch,
            id,
        }
    })
}

pub(crate) fn check_live(node: NodeRef, op: &'static str) -> Result<usize> {
    TAPE.with(|t| {
        let tape = t.borrow();
        if node.epoch != tape.epoch {
            return Err(Error::contract(format!(
                "{op}: tensor was recorded on a cleared tape (epoch {} != {})",
                node.epoch, tape.epoch
            )));
        }
        Ok(node.id)
    })
}

/// Reverse sweep from `root` (a scalar node), seeding with gradient 1.
///
/// Accumulates into each reachable node's persistent grad and into parameter
/// sinks. Repeated sweeps keep accumulating until the tape is cleared.
pub(crate) fn backward_from(root: NodeRef) -> Result<()> {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        if root.epoch != tape.epoch {
            return Err(Error::contract(
                "backward: loss tensor was recorded on a cleared tape".to_string(),
            ));
        }
        let root_id = root.id;
        if tape.nodes[root_id].numel != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got {} elements",
                tape.nodes[root_id].numel
            )));
        }
        let mut pass = PassGrads {
            bufs: vec![None; root_id + 1],
            numels: tape.nodes[..=root_id].iter().map(|n| n.numel).collect(),
        };
        pass.bufs[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(g) = pass.bufs[id].take() else {
                continue;
            };
            // Closures only touch captured Rc data and `pass`, never the
            // thread-local tape, so taking the closure out is sound.
            let back = tape.nodes[id].backward.take();
            if let Some(back) = back.as_ref() {
                back(&g, &mut pass);
            }
            let node = &mut tape.nodes[id];
            node.backward = back;
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g.clone()),
            }
            if let Some(sink) = node.sink.clone() {
                sink.accumulate_grad(&g);
            }
        }
        Ok(())
    })
}

/// Read the accumulated gradient of a node, if backward has reached it.
pub(crate) fn node_grad(node: NodeRef) -> Result<Option<Vec<f64>>> {
    TAPE.with(|t| {
        let tape = t.borrow();
        if node.epoch != tape.epoch {
            return Err(Error::contract(
                "grad: tensor was recorded on a cleared tape".to_string(),
            ));
        }
        Ok(tape.nodes[node.id].grad.clone())
    })
}
