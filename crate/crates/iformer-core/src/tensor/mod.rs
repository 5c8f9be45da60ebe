//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major `f64` buffers (quantized to `f32`
//! precision in 32-bit mode, see [`precision`]). Operations on tracked
//! tensors record backward closures on a thread-local tape; `backward` on a
//! scalar loss sweeps the tape in reverse and populates gradients.

mod fdcheck;
mod io;
mod ops;
mod param;
mod precision;
mod rng;
mod tape;

pub use fdcheck::{
    finite_diff_check, finite_diff_check_multi, finite_diff_report, registered_ops, GradCheckCase,
};
pub use io::{
    read_ift_file, read_ift_stream, write_ift_file, write_ift_stream, ArchiveReader,
    ArchiveWriter, Dtype, TensorData,
};
pub use param::Param;
pub use precision::{precision, quantize, set_precision, Precision, PrecisionGuard};
pub use rng::RngState;
pub use tape::{clear_tape, tape_len, with_fresh_tape, NodeRef};

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{:?} tracked={} {:?}{}",
            self.shape,
            self.node.is_some(),
            preview,
            if self.data.len() > 8 { "..." } else { "" }
        )
    }
}

impl Tensor {
    pub(crate) fn from_parts(data: Rc<Vec<f64>>, shape: Vec<usize>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { data, shape, node }
    }

    /// New untracked tensor; errors if `data` length does not match `shape`.
    pub fn from_vec(mut data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        precision::quantize(&mut data);
        Ok(Tensor {
            data: Rc::new(data),
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape).unwrap()
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(vec![v; shape.iter().product()], shape).unwrap()
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(data, &[n, n]).unwrap()
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(rng: &mut RngState, shape: &[usize], std: f64) -> Self {
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.normal() * std)
            .collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    pub fn rand_uniform(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Self {
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.uniform_in(lo, hi))
            .collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Scalar value; errors unless the tensor has exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major element access for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Whether gradients will reach this tensor (alias of `is_tracked`).
    pub fn requires_grad_flag(&self) -> bool {
        self.node.is_some()
    }

    /// Mark as a differentiable leaf on the current tape.
    pub fn requires_grad(mut self) -> Self {
        if self.node.is_none() {
            self.node = Some(tape::record(self.data.len(), Box::new(|_, _| {}), None));
        }
        self
    }

    /// Same values, cut off from the tape (stop-gradient).
    pub fn detach(&self) -> Self {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Reverse sweep from this scalar. Errors if not scalar; a no-op when the
    /// tensor is untracked (nothing requires a gradient).
    pub fn backward(&self) -> Result<()> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        match self.node {
            Some(node) => tape::backward_from(node),
            None => Ok(()),
        }
    }

    /// Accumulated gradient after `backward`, as an untracked tensor.
    pub fn grad(&self) -> Result<Option<Tensor>> {
        match self.node {
            None => Ok(None),
            Some(node) => Ok(tape::node_grad(node)?
                .map(|g| Tensor::from_parts(Rc::new(g), self.shape.clone(), None))),
        }
    }

    /// Tape id of a tracked tensor; panics on tensors from a cleared tape.
    pub(crate) fn live_id(&self, op: &'static str) -> Option<usize> {
        self.node.map(|n| {
            tape::check_live(n, op)
                .unwrap_or_else(|e| panic!("use of tensor from a cleared tape: {e}"))
        })
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}
