//! Reverse-mode automatic differentiation engine.
//!
//! The engine is deliberately small: it provides exactly the operations the
//! motion networks need (dense elementwise/broadcast arithmetic, reductions,
//! matmul, masked 3-D convolution and the masked per-entity skeletal
//! convolution family) on eagerly-evaluated computation graphs.
//!
//! Gradients are built *as graph nodes*, so losses that contain gradients of
//! other values (R1, path-length regularization) differentiate correctly with
//! a second [`Graph::backward`] pass.
//!
//! Values are generic over [`Real`]: tests and the gradient oracle run in
//! `f64`, training runs in `f32`.

pub mod check;
pub mod conv;
pub mod graph;
pub mod ops;

pub use check::finite_diff_check;
pub use graph::{Graph, Var};

use thiserror::Error;

/// Scalar type the engine operates on. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Errors raised by graph construction and evaluation.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}{detail}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("configuration error in {op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("usage error in {op}: {msg}")]
    Usage { op: &'static str, msg: String },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::one(); n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::from_f64(v); n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![F::from_f64(v)],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Single scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Row-major strides of a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Broadcast two shapes (right-aligned, extent 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` expanded to `out_shape`, 0 on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let raw = strides_of(shape);
    let mut s = vec![0usize; nd];
    let off = nd - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { raw[i] };
    }
    s
}

/// Apply `f(out_idx, a_idx, b_idx)` over every coordinate of `shape`, with
/// precomputed (possibly zero) strides for the two inputs. Recursion keeps the
/// innermost axis as a tight loop.
pub fn zip_strided<FN: FnMut(usize, usize, usize)>(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    f: &mut FN,
) {
    fn rec<FN: FnMut(usize, usize, usize)>(
        shape: &[usize],
        sa: &[usize],
        sb: &[usize],
        dim: usize,
        oa: usize,
        ob: usize,
        oo: usize,
        so: &[usize],
        f: &mut FN,
    ) {
        if dim == shape.len() {
            f(oo, oa, ob);
            return;
        }
        if dim == shape.len() - 1 {
            let (la, lb, lo) = (sa[dim], sb[dim], so[dim]);
            for i in 0..shape[dim] {
                f(oo + i * lo, oa + i * la, ob + i * lb);
            }
            return;
        }
        for i in 0..shape[dim] {
            rec(shape, sa, sb, dim + 1, oa + i * sa[dim], ob + i * sb[dim], oo + i * so[dim], so, f);
        }
    }
    let so = strides_of(shape);
    if shape.is_empty() {
        f(0, 0, 0);
    } else {
        rec(shape, sa, sb, 0, 0, 0, 0, &so, f);
    }
}

/// Apply `f(full_idx, reduced_idx)` over every coordinate of `shape`, where
/// the reduced index collapses `axes` (stride 0 there).
pub fn map_reduced<FN: FnMut(usize, usize)>(shape: &[usize], axes: &[usize], f: &mut FN) {
    let mut red_shape = shape.to_vec();
    for &a in axes {
        red_shape[a] = 1;
    }
    let red_strides_full = strides_of(&red_shape);
    let mut red_strides = red_strides_full;
    for &a in axes {
        red_strides[a] = 0;
    }
    let full = strides_of(shape);
    zip_strided(shape, &full, &red_strides, &mut |_o, fa, fb| f(fa, fb));
}
