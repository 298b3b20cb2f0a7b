//! Dense kernels for the elementwise, reduction, shape and matmul ops.

use super::{broadcast_shapes, broadcast_strides, strides_of, zip_strided, Real, TensorData, TensorError, TensorResult};

/// Relaxed-mode floor for `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    // Split on sign so neither branch exponentiates a large positive value.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn unary<F: Real>(a: &TensorData<F>, f: impl Fn(F) -> F) -> TensorData<F> {
    TensorData {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Elementwise binary op on identically-shaped tensors.
pub fn binary_same<F: Real>(a: &TensorData<F>, b: &TensorData<F>, f: impl Fn(F, F) -> F) -> TensorData<F> {
    debug_assert_eq!(a.shape, b.shape);
    TensorData {
        shape: a.shape.clone(),
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Elementwise binary op with broadcasting (shapes pre-validated).
pub fn binary_bcast<F: Real>(a: &TensorData<F>, b: &TensorData<F>, f: impl Fn(F, F) -> F) -> TensorData<F> {
    if a.shape == b.shape {
        return binary_same(a, b, f);
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape).expect("shapes validated by caller");
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = vec![F::zero(); n];
    let (ad, bd) = (&a.data, &b.data);
    zip_strided(&out_shape, &sa, &sb, &mut |o, ia, ib| {
        out[o] = f(ad[ia], bd[ib]);
    });
    TensorData { shape: out_shape, data: out }
}

pub fn reduce_sum<F: Real>(a: &TensorData<F>, axes: &[usize], keep: bool) -> TensorData<F> {
    let mut kshape = a.shape.clone();
    for &ax in axes {
        kshape[ax] = 1;
    }
    let n: usize = kshape.iter().product();
    let mut out = vec![F::zero(); n];
    let full = strides_of(&a.shape);
    let mut red = strides_of(&kshape);
    for &ax in axes {
        red[ax] = 0;
    }
    let ad = &a.data;
    zip_strided(&a.shape, &full, &red, &mut |_o, ia, ir| {
        out[ir] += ad[ia];
    });
    let shape = if keep {
        kshape
    } else {
        a.shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    };
    TensorData { shape, data: out }
}

pub fn broadcast_to<F: Real>(a: &TensorData<F>, shape: &[usize]) -> TensorData<F> {
    let sa = broadcast_strides(&a.shape, shape);
    let n: usize = shape.iter().product();
    let mut out = vec![F::zero(); n];
    let so = strides_of(shape);
    let ad = &a.data;
    zip_strided(shape, &sa, &so, &mut |o, ia, _| {
        out[o] = ad[ia];
    });
    TensorData { shape: shape.to_vec(), data: out }
}

/// Sum `a` down to `shape` (the adjoint of broadcasting to `a.shape`).
pub fn sum_to<F: Real>(a: &TensorData<F>, shape: &[usize]) -> TensorData<F> {
    let st = broadcast_strides(shape, &a.shape);
    let n: usize = shape.iter().product();
    let mut out = vec![F::zero(); n];
    let full = strides_of(&a.shape);
    let ad = &a.data;
    zip_strided(&a.shape, &full, &st, &mut |_o, ia, it| {
        out[it] += ad[ia];
    });
    TensorData { shape: shape.to_vec(), data: out }
}

fn check_2d<F: Real>(op: &'static str, a: &TensorData<F>, b: &TensorData<F>) -> TensorResult<()> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("expected 2-D operands, got {:?} and {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

pub fn matmul<F: Real>(a: &TensorData<F>, b: &TensorData<F>) -> TensorResult<TensorData<F>> {
    check_2d("matmul", a, b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
            detail: " (inner axes differ)".into(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(TensorData { shape: vec![m, n], data: out })
}

/// `aᵀ · b` with `a: [m,k]`, `b: [m,n]` → `[k,n]`.
pub fn matmul_ta<F: Real>(a: &TensorData<F>, b: &TensorData<F>) -> TensorResult<TensorData<F>> {
    check_2d("matmul_ta", a, b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (m2, n) = (b.shape[0], b.shape[1]);
    if m != m2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_ta",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
            detail: " (leading axes differ)".into(),
        });
    }
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(TensorData { shape: vec![k, n], data: out })
}

/// `a · bᵀ` with `a: [m,k]`, `b: [n,k]` → `[m,n]`.
pub fn matmul_tb<F: Real>(a: &TensorData<F>, b: &TensorData<F>) -> TensorResult<TensorData<F>> {
    check_2d("matmul_tb", a, b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tb",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
            detail: " (trailing axes differ)".into(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(TensorData { shape: vec![m, n], data: out })
}

pub fn concat<F: Real>(xs: &[&TensorData<F>], axis: usize) -> TensorResult<TensorData<F>> {
    let nd = xs[0].ndim();
    if axis >= nd {
        return Err(TensorError::Dimension {
            op: "concat",
            msg: format!("axis {axis} out of range for rank {nd}"),
        });
    }
    for x in xs {
        if x.ndim() != nd {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: xs[0].shape.clone(),
                rhs: x.shape.clone(),
                detail: " (rank differs)".into(),
            });
        }
        for d in 0..nd {
            if d != axis && x.shape[d] != xs[0].shape[d] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: xs[0].shape.clone(),
                    rhs: x.shape.clone(),
                    detail: format!(" (axis {d})"),
                });
            }
        }
    }
    let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
    let mut shape = xs[0].shape.clone();
    shape[axis] = total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![F::zero(); outer * total * inner];
    for o in 0..outer {
        let mut off = 0usize;
        for x in xs {
            let len = x.shape[axis];
            let src = &x.data[o * len * inner..(o + 1) * len * inner];
            let dst = &mut out[(o * total + off) * inner..(o * total + off + len) * inner];
            dst.copy_from_slice(src);
            off += len;
        }
    }
    Ok(TensorData { shape, data: out })
}

pub fn slice<F: Real>(a: &TensorData<F>, axis: usize, start: usize, len: usize) -> TensorResult<TensorData<F>> {
    let nd = a.ndim();
    if axis >= nd {
        return Err(TensorError::Dimension {
            op: "slice",
            msg: format!("axis {axis} out of range for rank {nd}"),
        });
    }
    if start + len > a.shape[axis] {
        return Err(TensorError::Dimension {
            op: "slice",
            msg: format!("range {start}..{} exceeds extent {} on axis {axis}", start + len, a.shape[axis]),
        });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut out = vec![F::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &a.data[(o * mid + start) * inner..(o * mid + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    Ok(TensorData { shape, data: out })
}

pub fn embed_slice<F: Real>(a: &TensorData<F>, axis: usize, start: usize, out_len: usize) -> TensorResult<TensorData<F>> {
    let nd = a.ndim();
    if axis >= nd {
        return Err(TensorError::Dimension {
            op: "embed_slice",
            msg: format!("axis {axis} out of range for rank {nd}"),
        });
    }
    let len = a.shape[axis];
    if start + len > out_len {
        return Err(TensorError::Dimension {
            op: "embed_slice",
            msg: format!("slice {start}..{} exceeds target extent {out_len}", start + len),
        });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut shape = a.shape.clone();
    shape[axis] = out_len;
    let mut out = vec![F::zero(); outer * out_len * inner];
    for o in 0..outer {
        let src = &a.data[o * len * inner..(o + 1) * len * inner];
        out[(o * out_len + start) * inner..(o * out_len + start + len) * inner].copy_from_slice(src);
    }
    Ok(TensorData { shape, data: out })
}

pub fn cumsum<F: Real>(a: &TensorData<F>, axis: usize) -> TensorData<F> {
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = a.data.clone();
    for o in 0..outer {
        for m in 1..mid {
            for i in 0..inner {
                let prev = out[(o * mid + m - 1) * inner + i];
                out[(o * mid + m) * inner + i] += prev;
            }
        }
    }
    TensorData { shape: a.shape.clone(), data: out }
}

pub fn flip<F: Real>(a: &TensorData<F>, axis: usize) -> TensorData<F> {
    let outer: usize = a.shape[..axis].iter().product();
    let mid = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = vec![F::zero(); a.data.len()];
    for o in 0..outer {
        for m in 0..mid {
            let src = &a.data[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            let dst = &mut out[(o * mid + (mid - 1 - m)) * inner..(o * mid + (mid - m)) * inner];
            dst.copy_from_slice(src);
        }
    }
    TensorData { shape: a.shape.clone(), data: out }
}
