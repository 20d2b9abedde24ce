//! Dense matrices with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared, interior-mutable matrix of `f64` values with an
//! optional gradient buffer. A [`Tape`] records one backward closure per
//! differentiable operation during the forward pass and replays them in
//! reverse to accumulate gradients.
//!
//! Backward closures follow a clone-first discipline: they snapshot every
//! value or gradient they read into local buffers before accumulating into
//! any input, so an operation whose inputs alias its output (or each other)
//! never holds two live borrows of the same cell.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug)]
struct TensorData {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a matrix participating in automatic differentiation.
///
/// Cloning a `Tensor` clones the handle, not the data: all clones observe
/// the same values and gradient.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.0.borrow();
        f.debug_struct("Tensor")
            .field("rows", &d.rows)
            .field("cols", &d.cols)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Wrap `values` (row-major) as a `rows x cols` tensor.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for {rows}x{cols} shape", values.len()),
            ));
        }
        Ok(Tensor(Rc::new(RefCell::new(TensorData {
            rows,
            cols,
            values,
            grad: None,
            requires_grad: false,
        }))))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols]).unwrap()
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor::new(rows, cols, vec![value; rows * cols]).unwrap()
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("tensor", "ragged nested rows"));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(r, c, values)
    }

    /// Trainable tensor: values plus a gradient slot.
    pub fn param(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(rows, cols, values)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.0.borrow();
        (d.rows, d.cols)
    }

    pub fn len(&self) -> usize {
        let d = self.0.borrow();
        d.rows * d.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.0.borrow_mut().requires_grad = flag;
    }

    /// Snapshot of the values (row-major clone).
    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().values.clone()
    }

    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        let d = self.0.borrow();
        assert!(row < d.rows && col < d.cols, "index out of bounds");
        d.values[row * d.cols + col]
    }

    /// Scalar contents of a 1x1 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        let d = self.0.borrow();
        if d.rows != 1 || d.cols != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("expected 1x1, got {}x{}", d.rows, d.cols),
            ));
        }
        Ok(d.values[0])
    }

    /// Overwrite the values in place, preserving shape.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.borrow_mut();
        if values.len() != d.rows * d.cols {
            return Err(Error::shape(
                "set_values",
                format!("{} values for {}x{} tensor", values.len(), d.rows, d.cols),
            ));
        }
        d.values.copy_from_slice(values);
        Ok(())
    }

    pub fn set_value_at(&self, row: usize, col: usize, value: f64) {
        let mut d = self.0.borrow_mut();
        assert!(row < d.rows && col < d.cols, "index out of bounds");
        let idx = row * d.cols + col;
        d.values[idx] = value;
    }

    /// Snapshot of the accumulated gradient, if any has been written.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.len()])
    }

    /// Accumulate `delta` into the gradient buffer. No-op for tensors that
    /// do not require gradients, so ops can call it unconditionally.
    pub fn add_to_grad(&self, delta: &[f64]) {
        let mut d = self.0.borrow_mut();
        if !d.requires_grad {
            return;
        }
        let n = d.rows * d.cols;
        assert_eq!(delta.len(), n, "gradient length mismatch");
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Plain gradient-descent update: `values -= lr * grad`.
    /// Tensors with no accumulated gradient are left untouched.
    pub fn sgd_step(&self, lr: f64) {
        let mut d = self.0.borrow_mut();
        let Some(grad) = d.grad.take() else { return };
        for (v, g) in d.values.iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        d.grad = Some(grad);
    }

    /// `true` when both handles point at the same underlying storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Deep copy with fresh storage; gradient state is not copied.
    pub fn deep_clone(&self) -> Tensor {
        let d = self.0.borrow();
        let t = Tensor::new(d.rows, d.cols, d.values.clone()).unwrap();
        t.set_requires_grad(d.requires_grad);
        t
    }
}

type BackwardFn = Box<dyn FnOnce()>;

/// Records the backward pass of a computation.
///
/// Operations push one closure per differentiable step in forward order;
/// [`Tape::backward`] seeds the loss gradient with 1.0 and runs the closures
/// in reverse. An inactive tape records nothing, which is how inference-mode
/// forwards skip gradient work entirely.
pub struct Tape {
    records: RefCell<Vec<BackwardFn>>,
    active: bool,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            active: true,
            consumed: Cell::new(false),
        }
    }

    /// Tape that discards every record; use for evaluation-only forwards.
    pub fn inactive() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            active: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Push a backward closure; dropped silently when the tape is inactive.
    pub fn record(&self, f: impl FnOnce() + 'static) {
        if self.active {
            self.records.borrow_mut().push(Box::new(f));
        }
    }

    /// Run the recorded closures in reverse, seeding `d loss / d loss = 1`.
    ///
    /// The tape is consumed: running it a second time without [`Tape::reset`]
    /// is an error because the closures are gone.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.active {
            return Err(Error::InvalidInput(
                "backward called on an inactive tape".into(),
            ));
        }
        if self.consumed.get() {
            return Err(Error::InvalidInput(
                "backward called twice on the same tape; reset it first".into(),
            ));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}x{}", loss.rows(), loss.cols()),
            ));
        }
        self.consumed.set(true);
        loss.add_to_grad(&[1.0]);
        loop {
            let record = self.records.borrow_mut().pop();
            match record {
                Some(f) => f(),
                None => break,
            }
        }
        Ok(())
    }

    /// Drop any remaining records and allow a fresh forward/backward cycle.
    pub fn reset(&self) {
        self.records.borrow_mut().clear();
        self.consumed.set(false);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::new(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn ragged_nested_rows_rejected() {
        assert!(Tensor::from_nested(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let t = Tensor::param(1, 2, vec![0.0, 0.0]).unwrap();
        t.add_to_grad(&[1.0, 2.0]);
        t.add_to_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
    }

    #[test]
    fn non_grad_tensor_ignores_grad_writes() {
        let t = Tensor::new(1, 2, vec![0.0, 0.0]).unwrap();
        t.add_to_grad(&[1.0, 2.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_seeds_one_and_runs_in_reverse() {
        let tape = Tape::new();
        let loss = Tensor::param(1, 1, vec![3.0]).unwrap();
        let order = Rc::new(RefCell::new(Vec::new()));
        for i in 0..3 {
            let order = Rc::clone(&order);
            tape.record(move || order.borrow_mut().push(i));
        }
        tape.backward(&loss).unwrap();
        assert_eq!(loss.grad().unwrap(), vec![1.0]);
        assert_eq!(*order.borrow(), vec![2, 1, 0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let loss = Tensor::param(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn double_backward_without_reset_errors() {
        let tape = Tape::new();
        let loss = Tensor::param(1, 1, vec![0.0]).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
        tape.reset();
        loss.zero_grad();
        assert!(tape.backward(&loss).is_ok());
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let tape = Tape::inactive();
        tape.record(|| panic!("must never run"));
        assert!(tape.is_empty());
        let loss = Tensor::param(1, 1, vec![0.0]).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn sgd_step_applies_learning_rate() {
        let t = Tensor::param(1, 2, vec![1.0, -1.0]).unwrap();
        t.add_to_grad(&[0.5, 2.0]);
        t.sgd_step(0.1);
        assert_eq!(t.values(), vec![0.95, -1.2]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clones_share_storage_deep_clone_does_not() {
        let t = Tensor::param(1, 1, vec![1.0]).unwrap();
        let alias = t.clone();
        alias.set_values(&[2.0]).unwrap();
        assert_eq!(t.values(), vec![2.0]);
        assert!(t.same_storage(&alias));

        let copy = t.deep_clone();
        copy.set_values(&[5.0]).unwrap();
        assert_eq!(t.values(), vec![2.0]);
        assert!(!t.same_storage(&copy));
        assert!(copy.requires_grad());
    }
}
