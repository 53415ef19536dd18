//! Reverse-mode differentiation core: dense tensors with hand-written
//! backward passes, recorded on a per-graph basis via parent back-references.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod operators;
pub mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type for tensors. Implemented for `f32` and `f64`; fp64 is used
/// for oracle and gradient testing, fp32 for training.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// C = alpha * A(m x k) * B(k x n) + beta * C, arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover every element addressed by the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM into `c` with explicit strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover the full strided extent.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        )
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled (evaluation mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

pub(crate) struct OpRecord<T: Scalar> {
    pub parents: Vec<Tensor<T>>,
    /// Accumulates the output gradient into the parents' gradients.
    pub backward: Box<dyn Fn(&[T])>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: RefCell<Option<OpRecord<T>>>,
}

/// An n-dimensional array participating in reverse-mode differentiation.
///
/// Cloning is cheap (shared handle). Values are mutated only through
/// [`Tensor::values_mut`] (optimizer updates, finite-difference probes);
/// everything else treats tensors as immutable after construction.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                op: RefCell::new(None),
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{n} elements for shape {shape:?}"),
                format!("{}", values.len()),
            ));
        }
        Ok(Self::new_inner(shape.to_vec(), values, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], values: Vec<T>) -> Result<Self> {
        let mut t = Self::from_vec(shape, values)?;
        Rc::get_mut(&mut t.inner).expect("fresh tensor").requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::ZERO; n], false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![v; n], false)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_inner(vec![], vec![v], false)
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<T>, record: Option<OpRecord<T>>) -> Self {
        let t = Self::new_inner(shape, values, record.is_some());
        *t.inner.op.borrow_mut() = record;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<T>> {
        self.inner.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.values.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> T {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item() on tensor of {} elements", v.len());
        v[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst += *src;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached copy of the values as a constant leaf.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Mutable access to the gradient buffer, allocating zeros on first use.
    pub(crate) fn with_grad_buf(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::ZERO; self.numel()]);
        f(buf);
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// `requires_grad` tensor reachable through op records.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{:?}", self.shape()),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::ONE]);
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let op = node.inner.op.borrow();
            if let Some(rec) = op.as_ref() {
                (rec.backward)(&grad);
            }
        }
        Ok(())
    }

    /// Iterative post-order over the op graph, deduplicated by node id.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, child cursor)
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, idx)) = stack.pop() {
            let child = {
                let op = node.inner.op.borrow();
                op.as_ref().and_then(|rec| rec.parents.get(idx).cloned())
            };
            match child {
                Some(c) => {
                    stack.push((node, idx + 1));
                    if visited.insert(c.inner.id) {
                        stack.push((c, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

/// Returns true when the op graph should record this operation.
pub(crate) fn should_record<T: Scalar>(parents: &[&Tensor<T>]) -> bool {
    grad_enabled() && parents.iter().any(|p| p.requires_grad())
}
