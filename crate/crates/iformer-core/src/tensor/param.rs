//! Trainable parameters.
//!
//! A [`Param`] owns its value outside the tape. The first use in a recording
//! creates a leaf node and caches it for the tape epoch, so a parameter used
//! at several places (or in several frames of a clip) maps to a single leaf
//! and its gradients accumulate. After `backward`, gradients land in the slot
//! where the optimizer reads them.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::precision::quantize;
use super::tape::{self, NodeRef};
use super::Tensor;

pub struct ParamSlot {
    name: String,
    value: RefCell<Vec<f64>>,
    shape: Vec<usize>,
    grad: RefCell<Option<Vec<f64>>>,
    node_cache: Cell<Option<NodeRef>>,
}

impl ParamSlot {
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut grad = self.grad.borrow_mut();
        match grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *grad = Some(g.to_vec()),
        }
    }
}

/// A named trainable tensor.
#[derive(Clone)]
pub struct Param {
    slot: Rc<ParamSlot>,
}

impl Param {
    pub fn new(name: impl Into<String>, mut data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "param data/shape mismatch"
        );
        quantize(&mut data);
        Param {
            slot: Rc::new(ParamSlot {
                name: name.into(),
                value: RefCell::new(data),
                shape,
                grad: RefCell::new(None),
                node_cache: Cell::new(None),
            }),
        }
    }

    pub fn name(&self) -> String {
        self.slot.name.clone()
    }

    pub fn shape(&self) -> &[usize] {
        &self.slot.shape
    }

    pub fn numel(&self) -> usize {
        self.slot.shape.iter().product()
    }

    /// Current value as a tracked leaf tensor on this thread's tape.
    /// Reuses the epoch's existing leaf so gradients accumulate correctly.
    pub fn tensor(&self) -> Tensor {
        let data = Rc::new(self.slot.value.borrow().clone());
        if let Some(node) = self.slot.node_cache.get() {
            if tape::check_live(node, "param").is_ok() {
                return Tensor::from_parts(data, self.slot.shape.clone(), Some(node));
            }
        }
        let node = tape::record(data.len(), Box::new(|_, _| {}), Some(self.slot.clone()));
        self.slot.node_cache.set(Some(node));
        Tensor::from_parts(data, self.slot.shape.clone(), Some(node))
    }

    /// Current value as an untracked constant.
    pub fn constant(&self) -> Tensor {
        Tensor::from_parts(
            Rc::new(self.slot.value.borrow().clone()),
            self.slot.shape.clone(),
            None,
        )
    }

    pub fn value(&self) -> Vec<f64> {
        self.slot.value.borrow().clone()
    }

    pub fn set_value(&self, mut data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "param set_value length mismatch");
        quantize(&mut data);
        *self.slot.value.borrow_mut() = data;
        self.slot.node_cache.set(None);
    }

    /// Apply an in-place update to the value (optimizer step).
    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        let mut v = self.slot.value.borrow_mut();
        f(&mut v);
        quantize(&mut v);
        self.slot.node_cache.set(None);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.slot.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.slot.grad.borrow_mut() = None;
    }
}
