//! Masked convolution kernels: the general 3-D family and the skeletal
//! per-entity family. Each family is a closed triple (forward, adjoint,
//! weight-gradient) so backward passes are expressible as graph ops.
//!
//! All batch-parallel loops write disjoint per-sample chunks and reduce in a
//! fixed order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{broadcast_shapes, Real, TensorData, TensorError, TensorResult};

#[inline]
fn out_extent(op: &'static str, n: usize, k: usize, s: usize, p: usize) -> TensorResult<usize> {
    if s == 0 {
        return Err(TensorError::Config { op, msg: "stride must be ≥ 1".into() });
    }
    if n + 2 * p < k {
        return Err(TensorError::Config {
            op,
            msg: format!("kernel {k} exceeds padded extent {}", n + 2 * p),
        });
    }
    let o = (n + 2 * p - k) / s + 1;
    if o == 0 {
        return Err(TensorError::Config { op, msg: "zero-extent output".into() });
    }
    Ok(o)
}

/// Valid output-index range `[lo, hi)` such that `0 <= s*t + u - p < n`.
#[inline]
fn tap_range(n: usize, t_out: usize, s: usize, p: usize, u: usize) -> (usize, usize) {
    let lo = if u >= p { 0 } else { (p - u).div_ceil(s) };
    let hi_excl = (n + p).saturating_sub(u); // s*t < n + p - u
    let hi = if hi_excl == 0 { 0 } else { ((hi_excl - 1) / s + 1).min(t_out) };
    (lo.min(hi), hi)
}

/// Adjacency lists from a binary `[E_out, E_in]` mask.
fn mask_adjacency<F: Real>(mask: &TensorData<F>) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let (eo, ei) = (mask.shape[0], mask.shape[1]);
    let mut adj = vec![Vec::new(); eo];
    let mut radj = vec![Vec::new(); ei];
    for o in 0..eo {
        for i in 0..ei {
            if mask.data[o * ei + i] != F::zero() {
                adj[o].push(i);
                radj[i].push(o);
            }
        }
    }
    (adj, radj)
}

// ── Skeletal per-entity convolution ──────────────────────────────────────

struct EntityDims {
    b: usize,
    bw: usize,
    ko: usize,
    ki: usize,
    eo: usize,
    ei: usize,
    u: usize,
}

fn check_entity<F: Real>(
    op: &'static str,
    x_shape: &[usize],
    w: &TensorData<F>,
    mask: &TensorData<F>,
    x_is_input_side: bool,
) -> TensorResult<EntityDims> {
    if w.ndim() != 6 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("weight must be 6-D [Bw,K_out,K_in,E_out,E_in,U], got {:?}", w.shape),
        });
    }
    if x_shape.len() != 4 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("data must be 4-D [B,K,E,T], got {x_shape:?}"),
        });
    }
    let (bw, ko, ki, eo, ei, u) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3], w.shape[4], w.shape[5]);
    if mask.shape != [eo, ei] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: mask.shape.clone(),
            rhs: vec![eo, ei],
            detail: " (mask vs weight entity axes)".into(),
        });
    }
    let b = x_shape[0];
    let (kx, ex) = if x_is_input_side { (ki, ei) } else { (ko, eo) };
    if x_shape[1] != kx || x_shape[2] != ex {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: vec![b, kx, ex, x_shape[3]],
            detail: " (channel/entity axes vs weight)".into(),
        });
    }
    if bw != 1 && bw != b {
        return Err(TensorError::Dimension {
            op,
            msg: format!("weight batch extent {bw} incompatible with data batch {b}"),
        });
    }
    Ok(EntityDims { b, bw, ko, ki, eo, ei, u })
}

pub fn entity_conv<F: Real>(
    x: &TensorData<F>,
    w: &TensorData<F>,
    mask: &TensorData<F>,
    stride: usize,
    pad: usize,
) -> TensorResult<TensorData<F>> {
    let d = check_entity("entity_conv", &x.shape, w, mask, true)?;
    let t = x.shape[3];
    let tp = out_extent("entity_conv", t, d.u, stride, pad)?;
    let (adj, _) = mask_adjacency(mask);
    let mut out = vec![F::zero(); d.b * d.ko * d.eo * tp];
    let per_b = d.ko * d.eo * tp;
    let run = |b: usize, ob: &mut [F]| {
        let wb = if d.bw == d.b { b } else { 0 };
        for ko in 0..d.ko {
            for eo in 0..d.eo {
                let os = &mut ob[(ko * d.eo + eo) * tp..(ko * d.eo + eo + 1) * tp];
                for &ei in &adj[eo] {
                    for ki in 0..d.ki {
                        let xs = &x.data[((b * d.ki + ki) * d.ei + ei) * t..((b * d.ki + ki) * d.ei + ei + 1) * t];
                        let wbase = ((((wb * d.ko + ko) * d.ki + ki) * d.eo + eo) * d.ei + ei) * d.u;
                        for u in 0..d.u {
                            let c = w.data[wbase + u];
                            let (lo, hi) = tap_range(t, tp, stride, pad, u);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                let xoff = lo + u - pad;
                                let xs2 = &xs[xoff..xoff + (hi - lo)];
                                let os2 = &mut os[lo..hi];
                                for (o, &xv) in os2.iter_mut().zip(xs2.iter()) {
                                    *o += c * xv;
                                }
                            } else {
                                let mut xi = stride * lo + u - pad;
                                for o in os[lo..hi].iter_mut() {
                                    *o += c * xs[xi];
                                    xi += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if d.b > 1 {
        out.par_chunks_mut(per_b).enumerate().for_each(|(b, ob)| run(b, ob));
    } else {
        run(0, &mut out);
    }
    Ok(TensorData { shape: vec![d.b, d.ko, d.eo, tp], data: out })
}

pub fn entity_conv_adjoint<F: Real>(
    y: &TensorData<F>,
    w: &TensorData<F>,
    mask: &TensorData<F>,
    stride: usize,
    pad: usize,
    out_time: Option<usize>,
) -> TensorResult<TensorData<F>> {
    let d = check_entity("entity_conv_transposed", &y.shape, w, mask, false)?;
    let tp = y.shape[3];
    let t = match out_time {
        Some(t) => t,
        None => (tp - 1) * stride + d.u - 2 * pad,
    };
    let t_check = out_extent("entity_conv_transposed", t, d.u, stride, pad)?;
    if t_check != tp {
        return Err(TensorError::Config {
            op: "entity_conv_transposed",
            msg: format!("output time {t} inconsistent with input time {tp}"),
        });
    }
    let (adj, radj) = mask_adjacency(mask);
    let _ = adj;
    let mut out = vec![F::zero(); d.b * d.ki * d.ei * t];
    let per_b = d.ki * d.ei * t;
    let run = |b: usize, ob: &mut [F]| {
        let wb = if d.bw == d.b { b } else { 0 };
        for ki in 0..d.ki {
            for ei in 0..d.ei {
                let os = &mut ob[(ki * d.ei + ei) * t..(ki * d.ei + ei + 1) * t];
                for &eo in &radj[ei] {
                    for ko in 0..d.ko {
                        let ys = &y.data[((b * d.ko + ko) * d.eo + eo) * tp..((b * d.ko + ko) * d.eo + eo + 1) * tp];
                        let wbase = ((((wb * d.ko + ko) * d.ki + ki) * d.eo + eo) * d.ei + ei) * d.u;
                        for u in 0..d.u {
                            let c = w.data[wbase + u];
                            let (lo, hi) = tap_range(t, tp, stride, pad, u);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                let xoff = lo + u - pad;
                                let os2 = &mut os[xoff..xoff + (hi - lo)];
                                let ys2 = &ys[lo..hi];
                                for (o, &yv) in os2.iter_mut().zip(ys2.iter()) {
                                    *o += c * yv;
                                }
                            } else {
                                let mut xi = stride * lo + u - pad;
                                for &yv in ys[lo..hi].iter() {
                                    os[xi] += c * yv;
                                    xi += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if d.b > 1 {
        out.par_chunks_mut(per_b).enumerate().for_each(|(b, ob)| run(b, ob));
    } else {
        run(0, &mut out);
    }
    Ok(TensorData { shape: vec![d.b, d.ki, d.ei, t], data: out })
}

pub fn entity_conv_wgrad<F: Real>(
    x: &TensorData<F>,
    gy: &TensorData<F>,
    mask: &TensorData<F>,
    stride: usize,
    pad: usize,
    wshape: &[usize],
) -> TensorResult<TensorData<F>> {
    if wshape.len() != 6 {
        return Err(TensorError::Dimension {
            op: "entity_conv_wgrad",
            msg: format!("weight shape must be 6-D, got {wshape:?}"),
        });
    }
    let w_dummy = TensorData::<F> { shape: wshape.to_vec(), data: Vec::new() };
    let d = check_entity("entity_conv_wgrad", &x.shape, &w_dummy, mask, true)?;
    let t = x.shape[3];
    let tp = out_extent("entity_conv_wgrad", t, d.u, stride, pad)?;
    if gy.shape != [d.b, d.ko, d.eo, tp] {
        return Err(TensorError::ShapeMismatch {
            op: "entity_conv_wgrad",
            lhs: gy.shape.clone(),
            rhs: vec![d.b, d.ko, d.eo, tp],
            detail: " (upstream gradient)".into(),
        });
    }
    let (adj, _) = mask_adjacency(mask);
    let per_w = d.ko * d.ki * d.eo * d.ei * d.u;
    let mut out = vec![F::zero(); d.bw * per_w];
    let accumulate = |wg: &mut [F], b: usize| {
        for ko in 0..d.ko {
            for eo in 0..d.eo {
                let ys = &gy.data[((b * d.ko + ko) * d.eo + eo) * tp..((b * d.ko + ko) * d.eo + eo + 1) * tp];
                for &ei in &adj[eo] {
                    for ki in 0..d.ki {
                        let xs = &x.data[((b * d.ki + ki) * d.ei + ei) * t..((b * d.ki + ki) * d.ei + ei + 1) * t];
                        let wbase = (((ko * d.ki + ki) * d.eo + eo) * d.ei + ei) * d.u;
                        for u in 0..d.u {
                            let (lo, hi) = tap_range(t, tp, stride, pad, u);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = F::zero();
                            if stride == 1 {
                                let xoff = lo + u - pad;
                                for (&yv, &xv) in ys[lo..hi].iter().zip(xs[xoff..xoff + (hi - lo)].iter()) {
                                    acc += yv * xv;
                                }
                            } else {
                                let mut xi = stride * lo + u - pad;
                                for &yv in ys[lo..hi].iter() {
                                    acc += yv * xs[xi];
                                    xi += stride;
                                }
                            }
                            wg[wbase + u] += acc;
                        }
                    }
                }
            }
        }
    };
    if d.bw == d.b {
        if d.b > 1 {
            out.par_chunks_mut(per_w).enumerate().for_each(|(b, wg)| accumulate(wg, b));
        } else {
            accumulate(&mut out, 0);
        }
    } else {
        // Shared weight: deterministic sequential accumulation over the batch.
        for b in 0..d.b {
            accumulate(&mut out, b);
        }
    }
    Ok(TensorData { shape: wshape.to_vec(), data: out })
}

// ── General masked 3-D convolution ───────────────────────────────────────

struct Conv3dDims {
    b: usize,
    batched: bool,
    ci: usize,
    co: usize,
    k: [usize; 3],
    n: [usize; 3],
}

fn check_conv3d<F: Real>(
    op: &'static str,
    x_shape: &[usize],
    f: &TensorData<F>,
    mask: &TensorData<F>,
    x_is_input_side: bool,
) -> TensorResult<Conv3dDims> {
    if f.ndim() != 5 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("filter must be 5-D [C_out,C_in,kD,kH,kW], got {:?}", f.shape),
        });
    }
    if broadcast_shapes(&mask.shape, &f.shape) != Some(f.shape.clone()) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: mask.shape.clone(),
            rhs: f.shape.clone(),
            detail: " (mask not broadcastable to filter)".into(),
        });
    }
    let (batched, b, c, n) = match x_shape.len() {
        4 => (false, 1usize, x_shape[0], [x_shape[1], x_shape[2], x_shape[3]]),
        5 => (true, x_shape[0], x_shape[1], [x_shape[2], x_shape[3], x_shape[4]]),
        _ => {
            return Err(TensorError::Dimension {
                op,
                msg: format!("data must be 4-D [C,D,H,W] or 5-D [B,C,D,H,W], got {x_shape:?}"),
            })
        }
    };
    let expect_c = if x_is_input_side { f.shape[1] } else { f.shape[0] };
    if c != expect_c {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: f.shape.clone(),
            detail: format!(" (channel axis {c} vs filter {expect_c})"),
        });
    }
    Ok(Conv3dDims {
        b,
        batched,
        ci: f.shape[1],
        co: f.shape[0],
        k: [f.shape[2], f.shape[3], f.shape[4]],
        n,
    })
}

fn masked_filter<F: Real>(f: &TensorData<F>, mask: &TensorData<F>) -> Vec<F> {
    if mask.shape == f.shape {
        f.data.iter().zip(mask.data.iter()).map(|(&a, &m)| a * m).collect()
    } else {
        super::ops::binary_bcast(mask, f, |m, a| m * a).data
    }
}

pub fn conv3d<F: Real>(
    x: &TensorData<F>,
    f: &TensorData<F>,
    mask: &TensorData<F>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> TensorResult<TensorData<F>> {
    let d = check_conv3d("conv3d", &x.shape, f, mask, true)?;
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = out_extent("conv3d", d.n[a], d.k[a], stride[a], pad[a])?;
    }
    let fm = masked_filter(f, mask);
    let mut out = vec![F::zero(); d.b * d.co * o[0] * o[1] * o[2]];
    let (n, k) = (d.n, d.k);
    let x_per_b = d.ci * n[0] * n[1] * n[2];
    let o_per_b = d.co * o[0] * o[1] * o[2];
    for b in 0..d.b {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for kd in 0..k[0] {
                    let (dlo, dhi) = tap_range(n[0], o[0], stride[0], pad[0], kd);
                    for kh in 0..k[1] {
                        let (hlo, hhi) = tap_range(n[1], o[1], stride[1], pad[1], kh);
                        for kw in 0..k[2] {
                            let (wlo, whi) = tap_range(n[2], o[2], stride[2], pad[2], kw);
                            let c = fm[(((co * d.ci + ci) * k[0] + kd) * k[1] + kh) * k[2] + kw];
                            if c == F::zero() {
                                continue;
                            }
                            for od in dlo..dhi {
                                let id = od * stride[0] + kd - pad[0];
                                for oh in hlo..hhi {
                                    let ih = oh * stride[1] + kh - pad[1];
                                    let xrow = b * x_per_b + ((ci * n[0] + id) * n[1] + ih) * n[2];
                                    let orow = b * o_per_b + ((co * o[0] + od) * o[1] + oh) * o[2];
                                    if stride[2] == 1 {
                                        let xoff = xrow + wlo + kw - pad[2];
                                        for i in 0..(whi - wlo) {
                                            out[orow + wlo + i] += c * x.data[xoff + i];
                                        }
                                    } else {
                                        let mut xi = xrow + stride[2] * wlo + kw - pad[2];
                                        for ow in wlo..whi {
                                            out[orow + ow] += c * x.data[xi];
                                            xi += stride[2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.b, d.co, o[0], o[1], o[2]]
    } else {
        vec![d.co, o[0], o[1], o[2]]
    };
    Ok(TensorData { shape, data: out })
}

pub fn conv3d_adjoint<F: Real>(
    y: &TensorData<F>,
    f: &TensorData<F>,
    mask: &TensorData<F>,
    stride: [usize; 3],
    pad: [usize; 3],
    out_spatial: Option<[usize; 3]>,
) -> TensorResult<TensorData<F>> {
    let d = check_conv3d("conv3d_transposed", &y.shape, f, mask, false)?;
    let o = d.n; // y's spatial extents
    let mut n = [0usize; 3];
    for a in 0..3 {
        n[a] = match out_spatial {
            Some(s) => s[a],
            None => (o[a] - 1) * stride[a] + d.k[a] - 2 * pad[a],
        };
        let check = out_extent("conv3d_transposed", n[a], d.k[a], stride[a], pad[a])?;
        if check != o[a] {
            return Err(TensorError::Config {
                op: "conv3d_transposed",
                msg: format!("axis {a}: output extent {} inconsistent with input extent {}", n[a], o[a]),
            });
        }
    }
    let fm = masked_filter(f, mask);
    let k = d.k;
    let mut out = vec![F::zero(); d.b * d.ci * n[0] * n[1] * n[2]];
    let x_per_b = d.ci * n[0] * n[1] * n[2];
    let y_per_b = d.co * o[0] * o[1] * o[2];
    for b in 0..d.b {
        for ci in 0..d.ci {
            for co in 0..d.co {
                for kd in 0..k[0] {
                    let (dlo, dhi) = tap_range(n[0], o[0], stride[0], pad[0], kd);
                    for kh in 0..k[1] {
                        let (hlo, hhi) = tap_range(n[1], o[1], stride[1], pad[1], kh);
                        for kw in 0..k[2] {
                            let (wlo, whi) = tap_range(n[2], o[2], stride[2], pad[2], kw);
                            let c = fm[(((co * d.ci + ci) * k[0] + kd) * k[1] + kh) * k[2] + kw];
                            if c == F::zero() {
                                continue;
                            }
                            for od in dlo..dhi {
                                let id = od * stride[0] + kd - pad[0];
                                for oh in hlo..hhi {
                                    let ih = oh * stride[1] + kh - pad[1];
                                    let xrow = b * x_per_b + ((ci * n[0] + id) * n[1] + ih) * n[2];
                                    let yrow = b * y_per_b + ((co * o[0] + od) * o[1] + oh) * o[2];
                                    if stride[2] == 1 {
                                        let xoff = xrow + wlo + kw - pad[2];
                                        for i in 0..(whi - wlo) {
                                            out[xoff + i] += c * y.data[yrow + wlo + i];
                                        }
                                    } else {
                                        let mut xi = xrow + stride[2] * wlo + kw - pad[2];
                                        for ow in wlo..whi {
                                            out[xi] += c * y.data[yrow + ow];
                                            xi += stride[2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.b, d.ci, n[0], n[1], n[2]]
    } else {
        vec![d.ci, n[0], n[1], n[2]]
    };
    Ok(TensorData { shape, data: out })
}

pub fn conv3d_wgrad<F: Real>(
    x: &TensorData<F>,
    gy: &TensorData<F>,
    mask: &TensorData<F>,
    stride: [usize; 3],
    pad: [usize; 3],
    fshape: &[usize],
) -> TensorResult<TensorData<F>> {
    let f_dummy = TensorData::<F> { shape: fshape.to_vec(), data: Vec::new() };
    let d = check_conv3d("conv3d_wgrad", &x.shape, &f_dummy, mask, true)?;
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = out_extent("conv3d_wgrad", d.n[a], d.k[a], stride[a], pad[a])?;
    }
    let expect_gy: Vec<usize> = if d.batched {
        vec![d.b, d.co, o[0], o[1], o[2]]
    } else {
        vec![d.co, o[0], o[1], o[2]]
    };
    if gy.shape != expect_gy {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_wgrad",
            lhs: gy.shape.clone(),
            rhs: expect_gy,
            detail: " (upstream gradient)".into(),
        });
    }
    let (n, k) = (d.n, d.k);
    let mut out = vec![F::zero(); d.co * d.ci * k[0] * k[1] * k[2]];
    let x_per_b = d.ci * n[0] * n[1] * n[2];
    let y_per_b = d.co * o[0] * o[1] * o[2];
    for b in 0..d.b {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for kd in 0..k[0] {
                    let (dlo, dhi) = tap_range(n[0], o[0], stride[0], pad[0], kd);
                    for kh in 0..k[1] {
                        let (hlo, hhi) = tap_range(n[1], o[1], stride[1], pad[1], kh);
                        for kw in 0..k[2] {
                            let (wlo, whi) = tap_range(n[2], o[2], stride[2], pad[2], kw);
                            let mut acc = F::zero();
                            for od in dlo..dhi {
                                let id = od * stride[0] + kd - pad[0];
                                for oh in hlo..hhi {
                                    let ih = oh * stride[1] + kh - pad[1];
                                    let xrow = b * x_per_b + ((ci * n[0] + id) * n[1] + ih) * n[2];
                                    let yrow = b * y_per_b + ((co * o[0] + od) * o[1] + oh) * o[2];
                                    if stride[2] == 1 {
                                        let xoff = xrow + wlo + kw - pad[2];
                                        for i in 0..(whi - wlo) {
                                            acc += gy.data[yrow + wlo + i] * x.data[xoff + i];
                                        }
                                    } else {
                                        let mut xi = xrow + stride[2] * wlo + kw - pad[2];
                                        for ow in wlo..whi {
                                            acc += gy.data[yrow + ow] * x.data[xi];
                                            xi += stride[2];
                                        }
                                    }
                                }
                            }
                            out[(((co * d.ci + ci) * k[0] + kd) * k[1] + kh) * k[2] + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    // Masked positions receive exactly zero gradient.
    let raw = TensorData { shape: fshape.to_vec(), data: out };
    let masked = if mask.shape == raw.shape {
        super::ops::binary_same(&raw, mask, |a, m| a * m)
    } else {
        super::ops::binary_bcast(mask, &raw, |m, a| m * a)
    };
    Ok(masked)
}
