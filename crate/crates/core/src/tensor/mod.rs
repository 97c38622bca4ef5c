//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors store flat row-major values with an explicit shape vector. A
//! [`Tape`] records every operation whose inputs carry gradient; calling
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients into every participating tensor. Leaves (created through
//! [`Tape::leaf`]) keep their gradient across backward calls; interior
//! results are re-zeroed at the start of each call, so two backward passes
//! double a leaf gradient and nothing else.
//!
//! Values are immutable once a tensor is built; only the gradient cell
//! mutates. A tape and everything recorded on it belong to a single thread.
//! Evaluation without a tape (all-constant inputs) records nothing and is
//! the fast path used by samplers.

mod conv;
mod linalg;
mod shape;

pub mod check;

pub use check::{check_gradient, GradReport, FD_FLOOR, FD_STEP};
pub use conv::PadMode;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::{Rc, Weak};

// ─── storage ───────────────────────────────────────────────────────────────

struct TensorInner {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True when gradient should accumulate here: tape leaves and every
    /// result produced from at least one tracked input.
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    tape: Weak<TapeInner>,
}

/// Cheap-to-clone handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor: never tracked, never on a tape.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            values.len(),
            numel(shape),
            "constant: {} values for shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                values,
                requires_grad: false,
                grad: RefCell::new(None),
                tape: Weak::new(),
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; numel(shape)], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Break the graph: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.values.clone(), &self.inner.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.values.iter().all(|v| v.is_finite())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.inner.values[0]
    }

    fn live_tape(&self) -> Option<Rc<TapeInner>> {
        self.inner.tape.upgrade()
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Accumulate into a single flat position (scatter-style backward).
    fn grad_buffer(&self) -> Option<std::cell::RefMut<'_, Vec<f64>>> {
        if !self.inner.requires_grad {
            return None;
        }
        let slot = self.inner.grad.borrow_mut();
        Some(std::cell::RefMut::map(slot, |s| {
            s.get_or_insert_with(|| vec![0.0; self.inner.values.len()])
        }))
    }
}

// ─── tape ──────────────────────────────────────────────────────────────────

struct Node {
    out: Tensor,
    /// Reads the output gradient, writes input gradients.
    back: Box<dyn Fn(&[f64])>,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Records operations for one forward pass; dropped to free the graph.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(TapeInner::default()),
        }
    }

    /// Differentiable input: gradient accumulates here across backward calls.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(values.len(), numel(shape), "leaf: size mismatch");
        Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                values,
                requires_grad: true,
                grad: RefCell::new(None),
                tape: Rc::downgrade(&self.inner),
            }),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    /// Reverse sweep from a scalar loss. Interior gradients are reset,
    /// the loss is seeded with 1, and every node runs exactly once in
    /// reverse creation order. Leaf gradients accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.inner.nodes.borrow();
        let produced = nodes
            .iter()
            .any(|n| Rc::ptr_eq(&n.out.inner, &loss.inner));
        if !produced {
            return Err(Error::DetachedGraph(
                "loss is not a result recorded on this tape".into(),
            ));
        }
        for n in nodes.iter() {
            *n.out.inner.grad.borrow_mut() = None;
        }
        *loss.inner.grad.borrow_mut() = Some(vec![1.0]);
        for n in nodes.iter().rev() {
            let g = n.out.inner.grad.borrow().clone();
            if let Some(g) = g {
                (n.back)(&g);
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ─── op plumbing ───────────────────────────────────────────────────────────

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Tape shared by the tracked inputs, or None for a pure evaluation.
/// Mixing tensors from two live tapes is a programming error.
fn joint_tape(inputs: &[&Tensor]) -> Option<Rc<TapeInner>> {
    let mut found: Option<Rc<TapeInner>> = None;
    for t in inputs {
        if let Some(tp) = t.live_tape() {
            match &found {
                Some(prev) => assert!(
                    Rc::ptr_eq(prev, &tp),
                    "operation mixes tensors from two different tapes"
                ),
                None => found = Some(tp),
            }
        }
    }
    found
}

/// Build the op result and, when gradient is flowing, record its backward.
fn make_result(
    inputs: &[&Tensor],
    values: Vec<f64>,
    shape: Vec<usize>,
    back: impl Fn(&Tensor, &[f64]) + 'static,
) -> Tensor {
    let tape = joint_tape(inputs);
    let tracked = tape.is_some() && inputs.iter().any(|t| t.inner.requires_grad);
    let out = Tensor {
        inner: Rc::new(TensorInner {
            shape,
            values,
            requires_grad: tracked,
            grad: RefCell::new(None),
            tape: tape
                .as_ref()
                .map(Rc::downgrade)
                .unwrap_or_default(),
        }),
    };
    if tracked {
        let out_handle = out.clone();
        let node = Node {
            out: out.clone(),
            back: Box::new(move |g| back(&out_handle, g)),
        };
        tape.unwrap().nodes.borrow_mut().push(node);
    }
    out
}

// ─── broadcasting ──────────────────────────────────────────────────────────

/// Trailing-dimension broadcast: align shapes at the right edge, pad the
/// shorter with leading 1s, and require each pair equal or 1.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |shape: &[usize], i: usize| -> usize {
        let off = rank - shape.len();
        if i < off {
            1
        } else {
            shape[i - off]
        }
    };
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim(a, i);
        let db = dim(b, i);
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Per-output-element flat index into an input shape under broadcasting:
/// stride 0 on broadcast axes.
pub(crate) fn broadcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides_of(in_shape);
    let offset = rank - in_shape.len();
    let mut s = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset {
            let d = in_shape[i - offset];
            s[i] = if d == 1 { 0 } else { in_strides[i - offset] };
        }
    }
    s
}

/// Walks every flat index of `out_shape` yielding the mapped flat indices
/// of two broadcast inputs.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let sa = broadcast_strides(out_shape, a_shape);
    let sb = broadcast_strides(out_shape, b_shape);
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..n {
        f(flat, ia, ib);
        // odometer increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

// ─── elementwise binary ────────────────────────────────────────────────────

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $back_a:expr, $back_b:expr) => {
        pub fn $name(&self, rhs: &Tensor) -> Result<Tensor> {
            let out_shape = broadcast_shape($opname, self.shape(), rhs.shape())?;
            let mut values = vec![0.0; numel(&out_shape)];
            {
                let av = self.values();
                let bv = rhs.values();
                let f: fn(f64, f64) -> f64 = $fwd;
                for_each_broadcast(&out_shape, self.shape(), rhs.shape(), |o, ia, ib| {
                    values[o] = f(av[ia], bv[ib]);
                });
            }
            let a = self.clone();
            let b = rhs.clone();
            let shape = out_shape.clone();
            Ok(make_result(&[self, rhs], values, out_shape, move |_out, g| {
                let av = a.values();
                let bv = b.values();
                let da: fn(f64, f64) -> f64 = $back_a;
                let db: fn(f64, f64) -> f64 = $back_b;
                if Rc::ptr_eq(&a.inner, &b.inner) {
                    // both operands are one tensor: one buffer, summed locals
                    if let Some(mut ga) = a.grad_buffer() {
                        for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
                            ga[ia] += g[o] * (da(av[ia], bv[ib]) + db(av[ia], bv[ib]));
                        });
                    }
                    return;
                }
                let mut ga = a.grad_buffer();
                let mut gb = b.grad_buffer();
                for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g[o] * da(av[ia], bv[ib]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g[o] * db(av[ia], bv[ib]);
                    }
                });
            }))
        }
    };
}

impl Tensor {
    binary_op!(add, "add", |a, b| a + b, |_a, _b| 1.0, |_a, _b| 1.0);
    binary_op!(sub, "sub", |a, b| a - b, |_a, _b| 1.0, |_a, _b| -1.0);
    binary_op!(mul, "mul", |a, b| a * b, |_a, b| b, |a, _b| a);
    binary_op!(
        div,
        "div",
        |a, b| a / b,
        |_a, b| 1.0 / b,
        |a, b| -a / (b * b)
    );
}

// ─── elementwise unary ─────────────────────────────────────────────────────

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tensor {
    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // derivative from (x, y)
        back: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let values: Vec<f64> = self.values().iter().map(|&x| fwd(x)).collect();
        let a = self.clone();
        make_result(&[self], values, self.shape().to_vec(), move |out, g| {
            let av = a.values();
            let yv = out.values();
            if let Some(mut ga) = a.grad_buffer() {
                for i in 0..g.len() {
                    ga[i] += g[i] * back(av[i], yv[i]);
                }
            }
        })
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    /// y = mul·x + add, scalar coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary(|x| mul * x + add, move |_x, _y| mul)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(
            |x| x.abs(),
            |x, _y| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _y| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_scalar, |_x, y| y * (1.0 - y))
    }

    /// tanh-form gaussian error linear unit.
    pub fn gelu(&self) -> Tensor {
        self.unary(
            |x| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            },
            |x, _y| {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            },
        )
    }

    /// Numerically stable ln(1 + e^x); derivative is the sigmoid.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _y| sigmoid_scalar(x),
        )
    }

    /// x · σ(x), used for conditioning MLPs.
    pub fn silu(&self) -> Result<Tensor> {
        self.mul(&self.sigmoid())
    }
}

// ─── differentiable two-sided gate ─────────────────────────────────────────

impl Tensor {
    /// Soft magnitude gate HT(x; γ) = x · (σ(−a(x+γ)) + σ(a(x−γ))).
    ///
    /// `gamma` is a one-element tensor, γ ≥ 0. At γ = 0 the two sigmoids sum
    /// to one analytically; the forward pass returns x bit-for-bit in that
    /// case so the identity is exact, while the backward pass keeps the
    /// analytic local derivatives.
    pub fn hard_threshold(&self, gamma: &Tensor, sharpness: f64) -> Result<Tensor> {
        if gamma.numel() != 1 {
            return Err(Error::invalid(format!(
                "hard_threshold: gamma must be one element, got shape {:?}",
                gamma.shape()
            )));
        }
        if sharpness <= 0.0 {
            return Err(Error::invalid("hard_threshold: sharpness must be > 0"));
        }
        let gm = gamma.item();
        if gm < 0.0 {
            return Err(Error::invalid(format!(
                "hard_threshold: gamma must be >= 0, got {gm}"
            )));
        }
        let a = sharpness;
        let xv = self.values();
        let values: Vec<f64> = if gm == 0.0 {
            xv.to_vec()
        } else {
            xv.iter()
                .map(|&x| {
                    let s = sigmoid_scalar(-a * (x + gm)) + sigmoid_scalar(a * (x - gm));
                    x * s
                })
                .collect()
        };
        let xt = self.clone();
        let gt = gamma.clone();
        Ok(make_result(
            &[self, gamma],
            values,
            self.shape().to_vec(),
            move |_out, g| {
                let gm = gt.values()[0];
                let xv = xt.values();
                let mut gamma_acc = 0.0;
                {
                    let mut gx = xt.grad_buffer();
                    for i in 0..g.len() {
                        let x = xv[i];
                        let s1 = sigmoid_scalar(-a * (x + gm));
                        let s2 = sigmoid_scalar(a * (x - gm));
                        let d1 = s1 * (1.0 - s1);
                        let d2 = s2 * (1.0 - s2);
                        let s = s1 + s2;
                        if let Some(gx) = gx.as_mut() {
                            // d/dx [x·s] = s + x·(−a·d1 + a·d2)
                            gx[i] += g[i] * (s + x * a * (d2 - d1));
                        }
                        // d/dγ [x·s] = x·(−a·d1 − a·d2)
                        gamma_acc += g[i] * (-a * x * (d1 + d2));
                    }
                }
                if let Some(mut gg) = gt.grad_buffer() {
                    gg[0] += gamma_acc;
                }
            },
        ))
    }
}

// ─── reductions ────────────────────────────────────────────────────────────

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let a = self.clone();
        make_result(&[self], vec![s], vec![1], move |_out, g| {
            if let Some(mut ga) = a.grad_buffer() {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.values().iter().sum();
        let a = self.clone();
        make_result(&[self], vec![s / n], vec![1], move |_out, g| {
            if let Some(mut ga) = a.grad_buffer() {
                let d = g[0] / n;
                for v in ga.iter_mut() {
                    *v += d;
                }
            }
        })
    }

    /// Sum of absolute values, as a one-element tensor.
    pub fn l1_norm(&self) -> Tensor {
        self.abs().sum_all()
    }
}
