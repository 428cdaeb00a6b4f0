//! Dense tensors with a tape of differentiable operations.
//!
//! Every tensor produced by an operation on gradient-tracking inputs records a
//! closure that maps the output adjoint to input adjoints. Node ids grow
//! monotonically per thread, so sorting the reachable nodes by descending id is
//! a valid reverse topological order; [`Tensor::backward`] replays the tape in
//! that order and visits each node once.
//!
//! Values are stored as `f64`. Model parameters are kept on the `f32` grid by
//! the optimizer and checkpoint layer, so the 32-bit contract of the parameter
//! blob holds while gradient checks get full double precision.

mod gemm;
pub mod gradcheck;
mod nn;
mod ops;

pub(crate) use gemm::gemm;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{arg_err, Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECK_FINITE: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations currently record themselves on the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with tape recording disabled (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Debug mode: every op output is checked for NaN/Inf and panics on violation.
pub fn set_check_finite(on: bool) {
    CHECK_FINITE.with(|c| c.set(on));
}

pub(crate) type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle to an immutable tensor node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor. Fails if the data length disagrees with the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(arg_err!("zero extent in shape {shape:?}"));
        }
        if numel(shape) != data.len() {
            return Err(arg_err!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Gradient-tracking leaf (a parameter or token table).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::new(shape, data)?;
        Ok(Self::leaf(t.0.shape.clone(), t.0.data.clone(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            grad_fn: None,
        }))
    }

    /// Records the result of an operation. The closure is dropped when no parent
    /// tracks gradients or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        if CHECK_FINITE.with(|c| c.get()) {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                panic!(
                    "non-finite value {} at flat index {i} of op output {shape:?}",
                    data[i]
                );
            }
        }
        let tracks = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let (parents, grad_fn) = if tracks {
            (parents, Some(grad_fn))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: tracks,
            grad: RefCell::new(None),
            parents,
            grad_fn,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values detached from the tape.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate additively
    /// across calls until [`Tensor::zero_grad`] resets them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(arg_err!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            ));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.0.requires_grad && !seen.contains_key(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            seen.insert(t.0.id, t);
        }
        let mut order: Vec<Tensor> = seen.into_values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            Err(arg_err!(
                "axis {axis} out of range for shape {:?}",
                self.shape()
            ))
        } else {
            Ok(())
        }
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            Err(Error::Argument(format!(
                "{what} expects rank {rank}, got shape {:?}",
                self.shape()
            )))
        } else {
            Ok(())
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn shared_input_sums_path_gradients() {
        // loss = sum(x * x) + sum(3x): x is consumed by two branches.
        let x = Tensor::param(&[2], vec![0.5, -1.5]).unwrap();
        let a = x.mul(&x).unwrap().sum();
        let b = x.scale(3.0).sum();
        a.add(&b).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 0.0]);
    }

    #[test]
    fn no_grad_skips_tape() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn finite_check_mode_panics() {
        set_check_finite(true);
        let x = Tensor::new(&[1], vec![f64::MAX]).unwrap();
        let _ = x.scale(10.0);
    }
}
