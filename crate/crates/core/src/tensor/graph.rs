//! Eager define-by-run computation graph.
//!
//! Every operation evaluates immediately and appends a node. Backward builds
//! the gradient *as new graph nodes* (every VJP is expressed through the same
//! op set), so an expression containing a gradient — R1, path-length — can be
//! differentiated again by a later `backward` call.

use std::collections::HashSet;

use super::conv;
use super::ops;
use super::{broadcast_shapes, Real, TensorData, TensorError, TensorResult};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    LeakyRelu(usize, f64),
    LeakyReluGrad { x: usize, g: usize, slope: f64 },
    ClampMin(usize, f64),
    ClampMinGrad { x: usize, g: usize, floor: f64 },
    Sigmoid(usize),
    Exp(usize),
    Log { x: usize, strict: bool },
    Square(usize),
    Sqrt(usize),
    Sum { x: usize, axes: Vec<usize>, keep: bool },
    Mean { x: usize, axes: Vec<usize>, keep: bool },
    BroadcastTo { x: usize, shape: Vec<usize> },
    SumTo { x: usize, shape: Vec<usize> },
    MatMul(usize, usize),
    MatMulTA(usize, usize),
    MatMulTB(usize, usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    EmbedSlice { x: usize, axis: usize, start: usize, out_len: usize },
    Reshape { x: usize, shape: Vec<usize> },
    CumSum { x: usize, axis: usize },
    Flip { x: usize, axis: usize },
    Conv3d { x: usize, f: usize, mask: usize, stride: [usize; 3], pad: [usize; 3] },
    Conv3dAdjoint {
        y: usize,
        f: usize,
        mask: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        out_spatial: Option<[usize; 3]>,
    },
    Conv3dWGrad {
        x: usize,
        gy: usize,
        mask: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        fshape: Vec<usize>,
    },
    EntityConv { x: usize, w: usize, mask: usize, stride: usize, pad: usize },
    EntityConvAdjoint {
        y: usize,
        w: usize,
        mask: usize,
        stride: usize,
        pad: usize,
        out_time: Option<usize>,
    },
    EntityConvWGrad {
        x: usize,
        gy: usize,
        mask: usize,
        stride: usize,
        pad: usize,
        wshape: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTA(a, b)
            | Op::MatMulTB(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::LeakyRelu(a, _)
            | Op::ClampMin(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log { x: a, .. }
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum { x: a, .. }
            | Op::Mean { x: a, .. }
            | Op::BroadcastTo { x: a, .. }
            | Op::SumTo { x: a, .. }
            | Op::Slice { x: a, .. }
            | Op::EmbedSlice { x: a, .. }
            | Op::Reshape { x: a, .. }
            | Op::CumSum { x: a, .. }
            | Op::Flip { x: a, .. } => vec![*a],
            Op::LeakyReluGrad { x, g, .. } => vec![*x, *g],
            Op::ClampMinGrad { x, g, .. } => vec![*x, *g],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv3d { x, f, mask, .. } => vec![*x, *f, *mask],
            Op::Conv3dAdjoint { y, f, mask, .. } => vec![*y, *f, *mask],
            Op::Conv3dWGrad { x, gy, mask, .. } => vec![*x, *gy, *mask],
            Op::EntityConv { x, w, mask, .. } => vec![*x, *w, *mask],
            Op::EntityConvAdjoint { y, w, mask, .. } => vec![*y, *w, *mask],
            Op::EntityConvWGrad { x, gy, mask, .. } => vec![*x, *gy, *mask],
        }
    }
}

pub(crate) struct Node<F> {
    pub value: TensorData<F>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

/// Computation graph. Nodes are append-only; ids are topologically ordered.
pub struct Graph<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
    /// (node id, parameter index) pairs registered through [`Graph::param_leaf`].
    pub(crate) bindings: Vec<(usize, usize)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorData<F>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires(*v))
    }

    pub fn value(&self, v: Var) -> &TensorData<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient populated by [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<TensorData<F>> {
        self.nodes[v.0].grad.as_ref().map(|g| TensorData {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: TensorData<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: TensorData<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(TensorData::scalar(v))
    }

    /// Leaf carrying the current value of parameter `idx` in an external
    /// store; gradients are collected back via [`Graph::param_bindings`].
    pub fn param_leaf(&mut self, t: TensorData<F>, idx: usize) -> Var {
        let v = self.leaf(t, true);
        self.bindings.push((v.0, idx));
        v
    }

    pub fn param_bindings(&self) -> &[(usize, usize)] {
        &self.bindings
    }

    // ── Elementwise / broadcast ──────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> TensorResult<Vec<usize>> {
        broadcast_shapes(self.shape(a), self.shape(b)).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
            detail: String::new(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b)?;
        let v = ops::binary_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0), self.any_requires(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b)?;
        let v = ops::binary_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0), self.any_requires(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b)?;
        let v = ops::binary_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0), self.any_requires(&[a, b])))
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("div", a, b)?;
        let v = ops::binary_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        Ok(self.push(v, Op::Div(a.0, b.0), self.any_requires(&[a, b])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = ops::unary(&self.nodes[a.0].value, |x| -x);
        let req = self.requires(a);
        self.push(v, Op::Neg(a.0), req)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let v = ops::unary(&self.nodes[a.0].value, |x| x + cf);
        let req = self.requires(a);
        self.push(v, Op::AddScalar(a.0, c), req)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let v = ops::unary(&self.nodes[a.0].value, |x| x * cf);
        let req = self.requires(a);
        self.push(v, Op::MulScalar(a.0, c), req)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let v = ops::unary(&self.nodes[a.0].value, |x| if x > F::zero() { x } else { x * s });
        let req = self.requires(a);
        self.push(v, Op::LeakyRelu(a.0, slope), req)
    }

    fn leaky_relu_grad(&mut self, x: Var, g: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let v = ops::binary_same(&self.nodes[x.0].value, &self.nodes[g.0].value, |xv, gv| {
            if xv > F::zero() {
                gv
            } else {
                gv * s
            }
        });
        let req = self.requires(g);
        self.push(v, Op::LeakyReluGrad { x: x.0, g: g.0, slope }, req)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let c = F::from_f64(floor);
        let v = ops::unary(&self.nodes[a.0].value, |x| if x > c { x } else { c });
        let req = self.requires(a);
        self.push(v, Op::ClampMin(a.0, floor), req)
    }

    fn clamp_min_grad(&mut self, x: Var, g: Var, floor: f64) -> Var {
        let c = F::from_f64(floor);
        let v = ops::binary_same(&self.nodes[x.0].value, &self.nodes[g.0].value, |xv, gv| {
            if xv > c {
                gv
            } else {
                F::zero()
            }
        });
        let req = self.requires(g);
        self.push(v, Op::ClampMinGrad { x: x.0, g: g.0, floor }, req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::unary(&self.nodes[a.0].value, ops::sigmoid_scalar);
        let req = self.requires(a);
        self.push(v, Op::Sigmoid(a.0), req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = ops::unary(&self.nodes[a.0].value, |x| x.exp());
        let req = self.requires(a);
        self.push(v, Op::Exp(a.0), req)
    }

    /// Natural log. Strict mode raises a domain error on non-positive input;
    /// relaxed mode clamps the argument at 1e-12.
    pub fn log(&mut self, a: Var, strict: bool) -> TensorResult<Var> {
        if strict {
            if let Some(bad) = self.nodes[a.0].value.data.iter().position(|v| *v <= F::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("non-positive value at flat index {bad} in strict mode"),
                });
            }
        }
        let floor = F::from_f64(ops::LOG_FLOOR);
        let v = ops::unary(&self.nodes[a.0].value, |x| if x > floor { x.ln() } else { floor.ln() });
        let req = self.requires(a);
        Ok(self.push(v, Op::Log { x: a.0, strict }, req))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = ops::unary(&self.nodes[a.0].value, |x| x * x);
        let req = self.requires(a);
        self.push(v, Op::Square(a.0), req)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = ops::unary(&self.nodes[a.0].value, |x| x.sqrt());
        let req = self.requires(a);
        self.push(v, Op::Sqrt(a.0), req)
    }

    // ── Reductions and shape ops ─────────────────────────────────────────

    fn check_axes(&self, op: &'static str, v: Var, axes: &[usize]) -> TensorResult<()> {
        let nd = self.shape(v).len();
        for &a in axes {
            if a >= nd {
                return Err(TensorError::Dimension {
                    op,
                    msg: format!("axis {a} out of range for rank {nd}"),
                });
            }
        }
        Ok(())
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize], keep: bool) -> TensorResult<Var> {
        self.check_axes("sum", a, axes)?;
        let v = ops::reduce_sum(&self.nodes[a.0].value, axes, keep);
        let req = self.requires(a);
        Ok(self.push(v, Op::Sum { x: a.0, axes: axes.to_vec(), keep }, req))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize], keep: bool) -> TensorResult<Var> {
        self.check_axes("mean", a, axes)?;
        let mut v = ops::reduce_sum(&self.nodes[a.0].value, axes, keep);
        let count: usize = axes.iter().map(|&ax| self.nodes[a.0].value.shape[ax]).product();
        let inv = F::from_f64(1.0 / count as f64);
        for d in &mut v.data {
            *d *= inv;
        }
        let req = self.requires(a);
        Ok(self.push(v, Op::Mean { x: a.0, axes: axes.to_vec(), keep }, req))
    }

    pub fn sum_all(&mut self, a: Var) -> TensorResult<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> TensorResult<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            // 0-d tensor: mean is the identity value as a fresh node.
            return Ok(self.mul_scalar(a, 1.0));
        }
        self.mean_axes(a, &axes, false)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        if broadcast_shapes(self.shape(a), shape) != Some(shape.to_vec()) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
                detail: String::new(),
            });
        }
        let v = ops::broadcast_to(&self.nodes[a.0].value, shape);
        let req = self.requires(a);
        Ok(self.push(v, Op::BroadcastTo { x: a.0, shape: shape.to_vec() }, req))
    }

    /// Sum-reduce `a` down to `shape` (inverse of broadcasting).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        if self.shape(a) == shape {
            return Ok(self.mul_scalar(a, 1.0));
        }
        if broadcast_shapes(shape, self.shape(a)) != Some(self.shape(a).to_vec()) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
                detail: String::new(),
            });
        }
        let v = ops::sum_to(&self.nodes[a.0].value, shape);
        let req = self.requires(a);
        Ok(self.push(v, Op::SumTo { x: a.0, shape: shape.to_vec() }, req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
                detail: " (element count differs)".into(),
            });
        }
        let v = TensorData { shape: shape.to_vec(), data: self.nodes[a.0].value.data.clone() };
        let req = self.requires(a);
        Ok(self.push(v, Op::Reshape { x: a.0, shape: shape.to_vec() }, req))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> TensorResult<Var> {
        if xs.is_empty() {
            return Err(TensorError::Usage { op: "concat", msg: "empty input list".into() });
        }
        let vals: Vec<&TensorData<F>> = xs.iter().map(|v| &self.nodes[v.0].value).collect();
        let v = ops::concat(&vals, axis)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let req = self.any_requires(xs);
        Ok(self.push(v, Op::Concat { xs: ids, axis }, req))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> TensorResult<Var> {
        let v = ops::slice(&self.nodes[a.0].value, axis, start, len)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::Slice { x: a.0, axis, start, len }, req))
    }

    /// Embed `a` into a zero tensor whose `axis` has extent `out_len`,
    /// starting at `start`. Adjoint of [`Graph::slice`].
    pub fn embed_slice(&mut self, a: Var, axis: usize, start: usize, out_len: usize) -> TensorResult<Var> {
        let v = ops::embed_slice(&self.nodes[a.0].value, axis, start, out_len)?;
        let req = self.requires(a);
        Ok(self.push(v, Op::EmbedSlice { x: a.0, axis, start, out_len }, req))
    }

    pub fn cumsum(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        self.check_axes("cumsum", a, &[axis])?;
        let v = ops::cumsum(&self.nodes[a.0].value, axis);
        let req = self.requires(a);
        Ok(self.push(v, Op::CumSum { x: a.0, axis }, req))
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        self.check_axes("flip", a, &[axis])?;
        let v = ops::flip(&self.nodes[a.0].value, axis);
        let req = self.requires(a);
        Ok(self.push(v, Op::Flip { x: a.0, axis }, req))
    }

    // ── Matmul family ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let v = ops::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMul(a.0, b.0), self.any_requires(&[a, b])))
    }

    /// `aᵀ · b` for 2-D `a`, `b`.
    pub fn matmul_ta(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let v = ops::matmul_ta(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMulTA(a.0, b.0), self.any_requires(&[a, b])))
    }

    /// `a · bᵀ` for 2-D `a`, `b`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let v = ops::matmul_tb(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Op::MatMulTB(a.0, b.0), self.any_requires(&[a, b])))
    }

    // ── Convolutions ─────────────────────────────────────────────────────

    fn check_mask_const(&self, op: &'static str, mask: Var) -> TensorResult<()> {
        if self.requires(mask) {
            return Err(TensorError::Usage { op, msg: "mask must not require gradients".into() });
        }
        Ok(())
    }

    /// Masked strided 3-D convolution.
    ///
    /// `x`: `[C_in, D, H, W]` or `[B, C_in, D, H, W]`; `f`: `[C_out, C_in, kD,
    /// kH, kW]`; `mask` broadcastable to the filter shape. Masked positions
    /// contribute zero to the output and receive exactly zero gradient.
    pub fn conv3d(
        &mut self,
        x: Var,
        f: Var,
        mask: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> TensorResult<Var> {
        self.check_mask_const("conv3d", mask)?;
        let v = conv::conv3d(
            &self.nodes[x.0].value,
            &self.nodes[f.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
        )?;
        Ok(self.push(v, Op::Conv3d { x: x.0, f: f.0, mask: mask.0, stride, pad }, self.any_requires(&[x, f])))
    }

    /// Exact adjoint of [`Graph::conv3d`] with the same filter and
    /// configuration: `⟨conv3d(x), y⟩ == ⟨x, conv3d_transposed(y)⟩`.
    pub fn conv3d_transposed(
        &mut self,
        y: Var,
        f: Var,
        mask: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> TensorResult<Var> {
        self.conv3d_adjoint_sized(y, f, mask, stride, pad, None)
    }

    fn conv3d_adjoint_sized(
        &mut self,
        y: Var,
        f: Var,
        mask: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        out_spatial: Option<[usize; 3]>,
    ) -> TensorResult<Var> {
        self.check_mask_const("conv3d_transposed", mask)?;
        let v = conv::conv3d_adjoint(
            &self.nodes[y.0].value,
            &self.nodes[f.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
            out_spatial,
        )?;
        Ok(self.push(
            v,
            Op::Conv3dAdjoint { y: y.0, f: f.0, mask: mask.0, stride, pad, out_spatial },
            self.any_requires(&[y, f]),
        ))
    }

    fn conv3d_wgrad(
        &mut self,
        x: Var,
        gy: Var,
        mask: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        fshape: Vec<usize>,
    ) -> TensorResult<Var> {
        let v = conv::conv3d_wgrad(
            &self.nodes[x.0].value,
            &self.nodes[gy.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
            &fshape,
        )?;
        Ok(self.push(
            v,
            Op::Conv3dWGrad { x: x.0, gy: gy.0, mask: mask.0, stride, pad, fshape },
            self.any_requires(&[x, gy]),
        ))
    }

    /// Skeletal convolution with a dedicated kernel per (output entity,
    /// input entity) pair.
    ///
    /// `x`: `[B, K_in, E_in, T]`, `w`: `[Bw, K_out, K_in, E_out, E_in, U]`
    /// with `Bw ∈ {1, B}`, `mask`: `[E_out, E_in]`. Temporal stride/padding
    /// only. Output `[B, K_out, E_out, T']`.
    pub fn entity_conv(&mut self, x: Var, w: Var, mask: Var, stride: usize, pad: usize) -> TensorResult<Var> {
        self.check_mask_const("entity_conv", mask)?;
        let v = conv::entity_conv(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
        )?;
        Ok(self.push(v, Op::EntityConv { x: x.0, w: w.0, mask: mask.0, stride, pad }, self.any_requires(&[x, w])))
    }

    /// Exact adjoint of [`Graph::entity_conv`] with the same weight block:
    /// maps `[B, K_out, E_out, T']` back to `[B, K_in, E_in, T]`. Used as the
    /// transposed-convolution upsampler.
    pub fn entity_conv_transposed(
        &mut self,
        y: Var,
        w: Var,
        mask: Var,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        self.entity_adjoint_sized(y, w, mask, stride, pad, None)
    }

    fn entity_adjoint_sized(
        &mut self,
        y: Var,
        w: Var,
        mask: Var,
        stride: usize,
        pad: usize,
        out_time: Option<usize>,
    ) -> TensorResult<Var> {
        self.check_mask_const("entity_conv_transposed", mask)?;
        let v = conv::entity_conv_adjoint(
            &self.nodes[y.0].value,
            &self.nodes[w.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
            out_time,
        )?;
        Ok(self.push(
            v,
            Op::EntityConvAdjoint { y: y.0, w: w.0, mask: mask.0, stride, pad, out_time },
            self.any_requires(&[y, w]),
        ))
    }

    fn entity_wgrad(
        &mut self,
        x: Var,
        gy: Var,
        mask: Var,
        stride: usize,
        pad: usize,
        wshape: Vec<usize>,
    ) -> TensorResult<Var> {
        let v = conv::entity_conv_wgrad(
            &self.nodes[x.0].value,
            &self.nodes[gy.0].value,
            &self.nodes[mask.0].value,
            stride,
            pad,
            &wshape,
        )?;
        Ok(self.push(
            v,
            Op::EntityConvWGrad { x: x.0, gy: gy.0, mask: mask.0, stride, pad, wshape },
            self.any_requires(&[x, gy]),
        ))
    }

    // ── Composite helpers ────────────────────────────────────────────────

    /// `sqrt(Σ x² over axes)`.
    pub fn l2_norm(&mut self, a: Var, axes: &[usize], keep: bool) -> TensorResult<Var> {
        let sq = self.square(a);
        let s = self.sum_axes(sq, axes, keep)?;
        Ok(self.sqrt(s))
    }

    /// `log(sigmoid(x))`, computed through the relaxed log guard.
    pub fn log_sigmoid(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.sigmoid(a);
        self.log(s, false)
    }

    /// `⟨a, b⟩` — sum of the elementwise product (shapes must match).
    pub fn inner(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "inner",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
                detail: String::new(),
            });
        }
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Build gradient nodes of `y` (seeded with ones, or `seed`) with respect
    /// to every requires-grad ancestor. Returns the gradient var of each
    /// requested node, `None` where no path exists. Purely graph-building:
    /// stored `grad` fields are untouched, so results can be differentiated
    /// again.
    pub fn grad_nodes(&mut self, y: Var, wrt: &[Var], seed: Option<Var>) -> TensorResult<Vec<Option<Var>>> {
        let map = self.build_vjp(y, seed)?;
        Ok(wrt.iter().map(|v| map[v.0]).collect())
    }

    fn build_vjp(&mut self, y: Var, seed: Option<Var>) -> TensorResult<Vec<Option<Var>>> {
        let n_at_start = self.nodes.len();
        // Ancestors of y that can reach a requires-grad leaf.
        let mut active: HashSet<usize> = HashSet::new();
        let mut stack = vec![y.0];
        while let Some(i) = stack.pop() {
            if !self.nodes[i].requires_grad || active.contains(&i) {
                continue;
            }
            active.insert(i);
            for j in self.nodes[i].op.inputs() {
                stack.push(j);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n_at_start];
        if !active.contains(&y.0) {
            return Ok(grads);
        }
        let seed_var = match seed {
            Some(s) => {
                if self.shape(s) != self.shape(y) {
                    return Err(TensorError::ShapeMismatch {
                        op: "backward",
                        lhs: self.shape(s).to_vec(),
                        rhs: self.shape(y).to_vec(),
                        detail: " (seed vs output)".into(),
                    });
                }
                s
            }
            None => {
                let t = TensorData::ones(&self.nodes[y.0].value.shape);
                self.constant(t)
            }
        };
        grads[y.0] = Some(seed_var);

        for i in (0..=y.0).rev() {
            if !active.contains(&i) {
                continue;
            }
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.vjp_op(i, &op, g, &mut grads, &active)?;
        }
        Ok(grads)
    }

    fn accum(&mut self, grads: &mut [Option<Var>], idx: usize, contrib: Var) -> TensorResult<()> {
        grads[idx] = Some(match grads[idx] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn vjp_op(
        &mut self,
        node: usize,
        op: &Op,
        g: Var,
        grads: &mut [Option<Var>],
        active: &HashSet<usize>,
    ) -> TensorResult<()> {
        let out = Var(node);
        macro_rules! push_if_active {
            ($idx:expr, $contrib:expr) => {
                if active.contains(&$idx) {
                    let c = $contrib;
                    self.accum(grads, $idx, c)?;
                }
            };
        }
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(Var(*a)).to_vec(), self.shape(Var(*b)).to_vec());
                push_if_active!(*a, self.sum_to(g, &sa)?);
                push_if_active!(*b, self.sum_to(g, &sb)?);
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(Var(*a)).to_vec(), self.shape(Var(*b)).to_vec());
                push_if_active!(*a, self.sum_to(g, &sa)?);
                push_if_active!(*b, {
                    let n = self.neg(g);
                    self.sum_to(n, &sb)?
                });
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(Var(*a)).to_vec(), self.shape(Var(*b)).to_vec());
                push_if_active!(*a, {
                    let p = self.mul(g, Var(*b))?;
                    self.sum_to(p, &sa)?
                });
                push_if_active!(*b, {
                    let p = self.mul(g, Var(*a))?;
                    self.sum_to(p, &sb)?
                });
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(Var(*a)).to_vec(), self.shape(Var(*b)).to_vec());
                push_if_active!(*a, {
                    let p = self.div(g, Var(*b))?;
                    self.sum_to(p, &sa)?
                });
                push_if_active!(*b, {
                    let q = self.div(out, Var(*b))?; // a / b²  as  out / b
                    let p = self.mul(g, q)?;
                    let n = self.neg(p);
                    self.sum_to(n, &sb)?
                });
            }
            Op::Neg(a) => push_if_active!(*a, self.neg(g)),
            Op::AddScalar(a, _) => push_if_active!(*a, self.mul_scalar(g, 1.0)),
            Op::MulScalar(a, c) => push_if_active!(*a, self.mul_scalar(g, *c)),
            Op::LeakyRelu(a, slope) => {
                push_if_active!(*a, self.leaky_relu_grad(Var(*a), g, *slope));
            }
            Op::LeakyReluGrad { x, g: gin, slope } => {
                // Linear in `gin`; zero a.e. in `x`.
                push_if_active!(*gin, self.leaky_relu_grad(Var(*x), g, *slope));
            }
            Op::ClampMin(a, floor) => {
                push_if_active!(*a, self.clamp_min_grad(Var(*a), g, *floor));
            }
            Op::ClampMinGrad { x, g: gin, floor } => {
                push_if_active!(*gin, self.clamp_min_grad(Var(*x), g, *floor));
            }
            Op::Sigmoid(a) => {
                push_if_active!(*a, {
                    let one_minus = {
                        let n = self.neg(out);
                        self.add_scalar(n, 1.0)
                    };
                    let d = self.mul(out, one_minus)?;
                    self.mul(g, d)?
                });
            }
            Op::Exp(a) => push_if_active!(*a, self.mul(g, out)?),
            Op::Log { x, strict } => {
                push_if_active!(*x, {
                    let denom = if *strict {
                        Var(*x)
                    } else {
                        self.clamp_min(Var(*x), ops::LOG_FLOOR)
                    };
                    self.div(g, denom)?
                });
            }
            Op::Square(a) => {
                push_if_active!(*a, {
                    let p = self.mul(g, Var(*a))?;
                    self.mul_scalar(p, 2.0)
                });
            }
            Op::Sqrt(a) => {
                push_if_active!(*a, {
                    let d = self.mul_scalar(out, 2.0);
                    self.div(g, d)?
                });
            }
            Op::Sum { x, axes, keep } => {
                push_if_active!(*x, {
                    let xs = self.shape(Var(*x)).to_vec();
                    let gk = if *keep {
                        g
                    } else {
                        let mut kshape = xs.clone();
                        for &a in axes {
                            kshape[a] = 1;
                        }
                        self.reshape(g, &kshape)?
                    };
                    self.broadcast_to(gk, &xs)?
                });
            }
            Op::Mean { x, axes, keep } => {
                push_if_active!(*x, {
                    let xs = self.shape(Var(*x)).to_vec();
                    let count: usize = axes.iter().map(|&a| xs[a]).product();
                    let gk = if *keep {
                        g
                    } else {
                        let mut kshape = xs.clone();
                        for &a in axes {
                            kshape[a] = 1;
                        }
                        self.reshape(g, &kshape)?
                    };
                    let b = self.broadcast_to(gk, &xs)?;
                    self.mul_scalar(b, 1.0 / count as f64)
                });
            }
            Op::BroadcastTo { x, .. } => {
                push_if_active!(*x, {
                    let xs = self.shape(Var(*x)).to_vec();
                    self.sum_to(g, &xs)?
                });
            }
            Op::SumTo { x, .. } => {
                push_if_active!(*x, {
                    let xs = self.shape(Var(*x)).to_vec();
                    self.broadcast_to(g, &xs)?
                });
            }
            Op::MatMul(a, b) => {
                push_if_active!(*a, self.matmul_tb(g, Var(*b))?);
                push_if_active!(*b, self.matmul_ta(Var(*a), g)?);
            }
            Op::MatMulTA(a, b) => {
                // out = aᵀ·b : da = b·gᵀ, db = a·g
                push_if_active!(*a, self.matmul_tb(Var(*b), g)?);
                push_if_active!(*b, self.matmul(Var(*a), g)?);
            }
            Op::MatMulTB(a, b) => {
                // out = a·bᵀ : da = g·b, db = gᵀ·a
                push_if_active!(*a, self.matmul(g, Var(*b))?);
                push_if_active!(*b, self.matmul_ta(g, Var(*a))?);
            }
            Op::Concat { xs, axis } => {
                let mut off = 0usize;
                for &xi in xs {
                    let len = self.shape(Var(xi))[*axis];
                    push_if_active!(xi, self.slice(g, *axis, off, len)?);
                    off += len;
                }
            }
            Op::Slice { x, axis, start, .. } => {
                push_if_active!(*x, {
                    let out_len = self.shape(Var(*x))[*axis];
                    self.embed_slice(g, *axis, *start, out_len)?
                });
            }
            Op::EmbedSlice { x, axis, start, .. } => {
                push_if_active!(*x, {
                    let len = self.shape(Var(*x))[*axis];
                    self.slice(g, *axis, *start, len)?
                });
            }
            Op::Reshape { x, .. } => {
                push_if_active!(*x, {
                    let xs = self.shape(Var(*x)).to_vec();
                    self.reshape(g, &xs)?
                });
            }
            Op::CumSum { x, axis } => {
                push_if_active!(*x, {
                    let f1 = self.flip(g, *axis)?;
                    let c = self.cumsum(f1, *axis)?;
                    self.flip(c, *axis)?
                });
            }
            Op::Flip { x, axis } => push_if_active!(*x, self.flip(g, *axis)?),
            Op::Conv3d { x, f, mask, stride, pad } => {
                let xs = self.shape(Var(*x)).to_vec();
                let spatial = [xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]];
                push_if_active!(*x, self.conv3d_adjoint_sized(g, Var(*f), Var(*mask), *stride, *pad, Some(spatial))?);
                push_if_active!(*f, {
                    let fshape = self.shape(Var(*f)).to_vec();
                    self.conv3d_wgrad(Var(*x), g, Var(*mask), *stride, *pad, fshape)?
                });
            }
            Op::Conv3dAdjoint { y, f, mask, stride, pad, .. } => {
                push_if_active!(*y, self.conv3d(g, Var(*f), Var(*mask), *stride, *pad)?);
                push_if_active!(*f, {
                    let fshape = self.shape(Var(*f)).to_vec();
                    self.conv3d_wgrad(g, Var(*y), Var(*mask), *stride, *pad, fshape)?
                });
            }
            Op::Conv3dWGrad { x, gy, mask, stride, pad, .. } => {
                let xs = self.shape(Var(*x)).to_vec();
                let spatial = [xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]];
                push_if_active!(*x, self.conv3d_adjoint_sized(Var(*gy), g, Var(*mask), *stride, *pad, Some(spatial))?);
                push_if_active!(*gy, self.conv3d(Var(*x), g, Var(*mask), *stride, *pad)?);
            }
            Op::EntityConv { x, w, mask, stride, pad } => {
                let t_in = *self.shape(Var(*x)).last().unwrap();
                push_if_active!(*x, self.entity_adjoint_sized(g, Var(*w), Var(*mask), *stride, *pad, Some(t_in))?);
                push_if_active!(*w, {
                    let wshape = self.shape(Var(*w)).to_vec();
                    self.entity_wgrad(Var(*x), g, Var(*mask), *stride, *pad, wshape)?
                });
            }
            Op::EntityConvAdjoint { y, w, mask, stride, pad, .. } => {
                push_if_active!(*y, self.entity_conv(g, Var(*w), Var(*mask), *stride, *pad)?);
                push_if_active!(*w, {
                    let wshape = self.shape(Var(*w)).to_vec();
                    self.entity_wgrad(g, Var(*y), Var(*mask), *stride, *pad, wshape)?
                });
            }
            Op::EntityConvWGrad { x, gy, mask, stride, pad, .. } => {
                let t_in = *self.shape(Var(*x)).last().unwrap();
                push_if_active!(*x, self.entity_adjoint_sized(Var(*gy), g, Var(*mask), *stride, *pad, Some(t_in))?);
                push_if_active!(*gy, self.entity_conv(Var(*x), g, Var(*mask), *stride, *pad)?);
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// requires-grad ancestor; grads accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let grads = self.build_vjp(loss, None)?;
        for (i, gv) in grads.iter().enumerate() {
            if let Some(gv) = gv {
                let data = self.nodes[gv.0].value.data.clone();
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(data.iter()) {
                            *a += *d;
                        }
                    }
                    None => self.nodes[i].grad = Some(data),
                }
            }
        }
        Ok(())
    }
}
