//! Reverse-mode differentiation over a single append-only tape.
//!
//! Every operation appends one node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse append order
//! exactly once and accumulates gradients into every node that depends on a
//! leaf registered with `requires_grad`.

use super::kernels::{self, bilinear_taps, gemm, im2col, nearest_index, split_axis, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    LogEps(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LogSumExp(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Bilinear(Var),
    Nearest(Var),
    AvgPool(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if a.numel() == 1 {
        Ok((Bcast::LeftScalar, b.shape().to_vec()))
    } else if b.numel() == 1 {
        Ok((Bcast::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

#[inline]
fn pick(data: &[f64], bc_scalar: bool, i: usize) -> f64 {
    if bc_scalar {
        data[0]
    } else {
        data[i]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = self.inputs_need_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) => {
                ng(a) || ng(b)
            }
            Op::MatMul(a, b) => ng(a) || ng(b),
            Op::Affine(x, w, b) => ng(x) || ng(w) || ng(b),
            Op::Concat(vs, _) => vs.iter().any(ng),
            Op::Conv2d { x, w, b, .. } => ng(x) || ng(w) || b.as_ref().is_some_and(ng),
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Exp(x)
            | Op::LogEps(x, _)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Sqrt(x)
            | Op::Clamp(x, _, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Expand(x)
            | Op::Slice(x, _, _)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Softmax(x, _)
            | Op::LogSumExp(x)
            | Op::Bilinear(x)
            | Op::Nearest(x)
            | Op::AvgPool(x, _) => ng(x),
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf)?;
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter; its gradient is reported by
    /// [`Tape::param_grads`] under `index`.
    pub fn param(&mut self, index: usize, value: Tensor) -> Result<Var> {
        let v = self.leaf(value, true)?;
        self.nodes[v.0].param = Some(index);
        Ok(v)
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bc, shape) = bcast(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let (ls, rs) = (bc == Bcast::LeftScalar, bc == Bcast::RightScalar);
        let data = (0..n)
            .map(|i| f(pick(ta.data(), ls, i), pick(tb.data(), rs, i)))
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push(name, out, mk(a, b, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scalar_mul", out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push("add_scalar", out, Op::Shift(x))
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scalar_mul(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x))
    }

    /// `ln(x + eps)`
    pub fn log_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let out = self.value(x).map(|v| (v + eps).ln());
        self.push("log", out, Op::LogEps(x, eps))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(x))
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(x, lo, hi))
    }

    /// `2^x`, computed as `exp(x · ln 2)`.
    pub fn power_of_two(&mut self, x: Var) -> Result<Var> {
        let scaled = self.scalar_mul(x, std::f64::consts::LN_2)?;
        self.exp(scaled)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k, m) = mm_dims("matmul", ta, tb)?;
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), false, tb.data(), false, &mut out, false);
        self.push("matmul", Tensor::new([n, m], out)?, Op::MatMul(a, b))
    }

    /// `x · w + b` with `b` added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, k, m) = mm_dims("affine", tx, tw)?;
        if tb.numel() != m {
            return Err(Error::shape(
                "affine",
                format!("bias has {} values, need {m}", tb.numel()),
            ));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(n, k, m, tx.data(), false, tw.data(), false, &mut out, true);
        self.push("affine", Tensor::new([n, m], out)?, Op::Affine(x, w, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} != 2", t.rank())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = transpose2(t.data(), r, c);
        self.push("transpose", Tensor::new([c, r], out)?, Op::Transpose(x))
    }

    // ---- shape --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x))
    }

    /// Repeats size-1 axes of `x` to reach `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let map = expand_map("expand", t.shape(), shape)?;
        let out: Vec<f64> = map.iter().map(|&i| t.data()[i]).collect();
        self.push("expand", Tensor::new(shape.to_vec(), out)?, Op::Expand(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?}", s, first),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push("concat", Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::new(shape, out)?, Op::Slice(x, axis, start))
    }

    // ---- reductions ---------------------------------------------------

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("reduce", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let s = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push("reduce", Tensor::new(shape, out)?, op)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Softmax along `axis` with per-slice max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::new(t.shape().to_vec(), out)?,
            Op::Softmax(x, axis),
        )
    }

    /// `ln Σ exp(x)` over every element, evaluated as
    /// `max + ln_1p(Σ_{others} exp(x − max))`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        if d.is_empty() {
            return Err(Error::shape("logsumexp", "empty input"));
        }
        let (arg, m) = d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
        let rest: f64 = d
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        self.push("logsumexp", Tensor::scalar(m + rest.ln_1p()), Op::LogSumExp(x))
    }

    // ---- images -------------------------------------------------------

    /// Dilated cross-correlation with zero "same" padding.
    /// `x: C_in×H×W`, `w: C_out×C_in×k×k`, optional bias `b: C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (c_out, c_in, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("conv2d dilation must be >= 1".into()));
        }
        if tx.shape()[0] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {c_in}", tx.shape()[0]),
            ));
        }
        let (h, wd) = (tx.shape()[1], tx.shape()[2]);
        let g = ConvGeom {
            c: c_in,
            h,
            w: wd,
            k: kh,
            dilation,
        };
        let hw = h * wd;
        let mut out = Vec::with_capacity(c_out * hw);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != c_out {
                return Err(Error::shape("conv2d", "bias length != output channels"));
            }
            for &bv in tb.data() {
                out.extend(std::iter::repeat_n(bv, hw));
            }
        } else {
            out.resize(c_out * hw, 0.0);
        }
        if kh == 1 {
            gemm(c_out, c_in, hw, tw.data(), false, tx.data(), false, &mut out, true);
        } else {
            let mut col = vec![0.0; g.col_rows() * hw];
            im2col(tx.data(), g, &mut col);
            gemm(c_out, g.col_rows(), hw, tw.data(), false, &col, false, &mut out, true);
        }
        self.push(
            "conv2d",
            Tensor::new([c_out, h, wd], out)?,
            Op::Conv2d { x, w, b, dilation },
        )
    }

    /// Bilinear resize of a `C×H×W` tensor, pixel-centre convention.
    pub fn bilinear_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, ih, iw) = chw("bilinear_resize", t)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("bilinear_resize", "target must be >= 1x1"));
        }
        let (ty, tx) = (bilinear_taps(ih, h), bilinear_taps(iw, w));
        let src = t.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &src[ch * ih * iw..(ch + 1) * ih * iw];
            for ry in &ty {
                let r0 = &plane[ry.lo * iw..(ry.lo + 1) * iw];
                let r1 = &plane[ry.hi * iw..(ry.hi + 1) * iw];
                for rx in &tx {
                    let top = (1.0 - rx.frac) * r0[rx.lo] + rx.frac * r0[rx.hi];
                    let bot = (1.0 - rx.frac) * r1[rx.lo] + rx.frac * r1[rx.hi];
                    out.push((1.0 - ry.frac) * top + ry.frac * bot);
                }
            }
        }
        self.push("bilinear_resize", Tensor::new([c, h, w], out)?, Op::Bilinear(x))
    }

    /// Nearest-neighbour resize; the gradient flows to the chosen source.
    pub fn nearest_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, ih, iw) = chw("nearest_resize", t)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("nearest_resize", "target must be >= 1x1"));
        }
        let (ny, nx) = (nearest_index(ih, h), nearest_index(iw, w));
        let src = t.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for &sy in &ny {
                for &sx in &nx {
                    out.push(src[(ch * ih + sy) * iw + sx]);
                }
            }
        }
        self.push("nearest_resize", Tensor::new([c, h, w], out)?, Op::Nearest(x))
    }

    /// Mean over non-overlapping `factor×factor` windows.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, ih, iw) = chw("avg_pool", t)?;
        if factor == 0 || ih % factor != 0 || iw % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("{ih}x{iw} not divisible by {factor}"),
            ));
        }
        let (h, w) = (ih / factor, iw / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let src = t.data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..ih {
                for xx in 0..iw {
                    out[(ch * h + y / factor) * w + xx / factor] += src[(ch * ih + y) * iw + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        self.push("avg_pool", Tensor::new([c, h, w], out)?, Op::AvgPool(x, factor))
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                backprop_node(&self.nodes, i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.needs_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every registered parameter.
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let p = n.param?;
                let g = self.grads.get(i)?.as_deref()?;
                Some((p, g))
            })
            .collect()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose2(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

fn mm_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            op,
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(op, format!("expected C×H×W, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// For each output element of an expand, the flat index of its source.
fn expand_map(op: &'static str, from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() != to.len() || from.iter().zip(to).any(|(&f, &t)| f != t && f != 1) {
        return Err(Error::shape(op, format!("cannot expand {from:?} to {to:?}")));
    }
    let rank = to.len();
    let mut src_stride = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        src_stride[d] = if from[d] == 1 { 0 } else { s };
        s *= from[d];
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&src_stride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// Adds `delta(i)` into the gradient of `v`, reducing when `v` was broadcast
/// as a scalar.
fn acc_bcast(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    scalar: bool,
    n: usize,
    delta: impl Fn(usize) -> f64,
) {
    if let Some(s) = slot(nodes, grads, v) {
        if scalar {
            s[0] += (0..n).map(&delta).sum::<f64>();
        } else {
            for (i, si) in s.iter_mut().enumerate() {
                *si += delta(i);
            }
        }
    }
}

fn acc_unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    delta: impl Fn(usize) -> f64,
) {
    if let Some(s) = slot(nodes, grads, v) {
        for (i, si) in s.iter_mut().enumerate() {
            *si += delta(i);
        }
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[i].value.data();
    let val = |v: &Var| nodes[v.0].value.data();
    let n = g.len();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) => {
            acc_bcast(nodes, grads, *a, *bc == Bcast::LeftScalar, n, |k| g[k]);
            acc_bcast(nodes, grads, *b, *bc == Bcast::RightScalar, n, |k| g[k]);
        }
        Op::Sub(a, b, bc) => {
            acc_bcast(nodes, grads, *a, *bc == Bcast::LeftScalar, n, |k| g[k]);
            acc_bcast(nodes, grads, *b, *bc == Bcast::RightScalar, n, |k| -g[k]);
        }
        Op::Mul(a, b, bc) => {
            let (ls, rs) = (*bc == Bcast::LeftScalar, *bc == Bcast::RightScalar);
            let (da, db) = (val(a), val(b));
            acc_bcast(nodes, grads, *a, ls, n, |k| g[k] * pick(db, rs, k));
            acc_bcast(nodes, grads, *b, rs, n, |k| g[k] * pick(da, ls, k));
        }
        Op::Div(a, b, bc) => {
            let (ls, rs) = (*bc == Bcast::LeftScalar, *bc == Bcast::RightScalar);
            let (da, db) = (val(a), val(b));
            acc_bcast(nodes, grads, *a, ls, n, |k| g[k] / pick(db, rs, k));
            acc_bcast(nodes, grads, *b, rs, n, |k| {
                let bv = pick(db, rs, k);
                -g[k] * pick(da, ls, k) / (bv * bv)
            });
        }
        Op::Scale(x, s) => acc_unary(nodes, grads, *x, |k| g[k] * s),
        Op::Shift(x) | Op::Reshape(x) => acc_unary(nodes, grads, *x, |k| g[k]),
        Op::Exp(x) => acc_unary(nodes, grads, *x, |k| g[k] * out[k]),
        Op::LogEps(x, eps) => {
            let dx = val(x);
            acc_unary(nodes, grads, *x, |k| g[k] / (dx[k] + eps))
        }
        Op::Sigmoid(x) => acc_unary(nodes, grads, *x, |k| g[k] * out[k] * (1.0 - out[k])),
        Op::Relu(x) => {
            let dx = val(x);
            acc_unary(nodes, grads, *x, |k| if dx[k] > 0.0 { g[k] } else { 0.0 })
        }
        Op::Sqrt(x) => acc_unary(nodes, grads, *x, |k| g[k] * 0.5 / out[k]),
        Op::Clamp(x, lo, hi) => {
            let dx = val(x);
            acc_unary(nodes, grads, *x, |k| {
                if dx[k] >= *lo && dx[k] <= *hi {
                    g[k]
                } else {
                    0.0
                }
            })
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (rows, inner, cols) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(s) = slot(nodes, grads, *a) {
                gemm(rows, cols, inner, g, false, tb.data(), true, s, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm(inner, rows, cols, ta.data(), true, g, false, s, true);
            }
        }
        Op::Affine(x, w, b) => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (rows, inner, cols) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
            if let Some(s) = slot(nodes, grads, *x) {
                gemm(rows, cols, inner, g, false, tw.data(), true, s, true);
            }
            if let Some(s) = slot(nodes, grads, *w) {
                gemm(inner, rows, cols, tx.data(), true, g, false, s, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for r in 0..rows {
                    for (sc, gv) in s.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *sc += gv;
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let shape = nodes[i].value.shape();
            let gt = transpose2(g, shape[0], shape[1]);
            acc_unary(nodes, grads, *x, |k| gt[k]);
        }
        Op::Expand(x) => {
            let from = nodes[x.0].value.shape();
            let map = expand_map("expand", from, nodes[i].value.shape())
                .expect("shape validated on forward");
            if let Some(s) = slot(nodes, grads, *x) {
                for (k, &src) in map.iter().enumerate() {
                    s[src] += g[k];
                }
            }
        }
        Op::Concat(xs, axis) => {
            let shape = nodes[i].value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for v in xs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(s) = slot(nodes, grads, *v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, gv) in s[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice(x, axis, start) => {
            let (outer, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let len = nodes[i].value.shape()[*axis];
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for (d, gv) in s[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += gv;
                    }
                }
            }
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let (_, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let scale = if matches!(nodes[i].op, Op::MeanAxis(..)) {
                1.0 / len as f64
            } else {
                1.0
            };
            acc_unary(nodes, grads, *x, |k| {
                let o = k / (len * inner);
                let r = k % inner;
                g[o * inner + r] * scale
            });
        }
        Op::SumAll(x) => acc_unary(nodes, grads, *x, |_| g[0]),
        Op::MeanAll(x) => {
            let m = nodes[x.0].value.numel() as f64;
            acc_unary(nodes, grads, *x, |_| g[0] / m)
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis);
            let mut dx = vec![0.0; n];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + r;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                    for l in 0..len {
                        dx[idx(l)] = out[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            acc_unary(nodes, grads, *x, |k| dx[k]);
        }
        Op::LogSumExp(x) => {
            let dx = val(x);
            let y = out[0];
            acc_unary(nodes, grads, *x, |k| g[0] * (dx[k] - y).exp());
        }
        Op::Conv2d { x, w, b, dilation } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (c_out, c_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
            let (h, wd) = (tx.shape()[1], tx.shape()[2]);
            let hw = h * wd;
            let geom = ConvGeom {
                c: c_in,
                h,
                w: wd,
                k,
                dilation: *dilation,
            };
            let rows = geom.col_rows();
            let need_w = nodes[w.0].needs_grad;
            let need_x = nodes[x.0].needs_grad;
            if k == 1 {
                if let Some(s) = slot(nodes, grads, *w) {
                    gemm(c_out, hw, c_in, g, false, tx.data(), true, s, true);
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    gemm(c_in, c_out, hw, tw.data(), true, g, false, s, true);
                }
            } else {
                if need_w {
                    let mut col = vec![0.0; rows * hw];
                    im2col(tx.data(), geom, &mut col);
                    if let Some(s) = slot(nodes, grads, *w) {
                        gemm(c_out, hw, rows, g, false, &col, true, s, true);
                    }
                }
                if need_x {
                    let mut dcol = vec![0.0; rows * hw];
                    gemm(rows, c_out, hw, tw.data(), true, g, false, &mut dcol, false);
                    if let Some(s) = slot(nodes, grads, *x) {
                        kernels::col2im(&dcol, geom, s);
                    }
                }
            }
            if let Some(b) = b {
                if let Some(s) = slot(nodes, grads, *b) {
                    for (co, sb) in s.iter_mut().enumerate() {
                        *sb += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Bilinear(x) => {
            let src_shape = nodes[x.0].value.shape();
            let (c, ih, iw) = (src_shape[0], src_shape[1], src_shape[2]);
            let os = nodes[i].value.shape();
            let (h, w) = (os[1], os[2]);
            let (ty, tx) = (bilinear_taps(ih, h), bilinear_taps(iw, w));
            if let Some(s) = slot(nodes, grads, *x) {
                for ch in 0..c {
                    let plane = &mut s[ch * ih * iw..(ch + 1) * ih * iw];
                    for (oy, ry) in ty.iter().enumerate() {
                        for (ox, rx) in tx.iter().enumerate() {
                            let gv = g[(ch * h + oy) * w + ox];
                            let top = (1.0 - ry.frac) * gv;
                            let bot = ry.frac * gv;
                            plane[ry.lo * iw + rx.lo] += (1.0 - rx.frac) * top;
                            plane[ry.lo * iw + rx.hi] += rx.frac * top;
                            plane[ry.hi * iw + rx.lo] += (1.0 - rx.frac) * bot;
                            plane[ry.hi * iw + rx.hi] += rx.frac * bot;
                        }
                    }
                }
            }
        }
        Op::Nearest(x) => {
            let src_shape = nodes[x.0].value.shape();
            let (c, ih, iw) = (src_shape[0], src_shape[1], src_shape[2]);
            let os = nodes[i].value.shape();
            let (h, w) = (os[1], os[2]);
            let (ny, nx) = (nearest_index(ih, h), nearest_index(iw, w));
            if let Some(s) = slot(nodes, grads, *x) {
                for ch in 0..c {
                    for (oy, &sy) in ny.iter().enumerate() {
                        for (ox, &sx) in nx.iter().enumerate() {
                            s[(ch * ih + sy) * iw + sx] += g[(ch * h + oy) * w + ox];
                        }
                    }
                }
            }
        }
        Op::AvgPool(x, factor) => {
            let src_shape = nodes[x.0].value.shape();
            let (ih, iw) = (src_shape[1], src_shape[2]);
            let (h, w) = (ih / factor, iw / factor);
            let norm = 1.0 / (factor * factor) as f64;
            acc_unary(nodes, grads, *x, |k| {
                let xx = k % iw;
                let y = (k / iw) % ih;
                let ch = k / (ih * iw);
                g[(ch * h + y / factor) * w + xx / factor] * norm
            });
        }
    }
}
