//! Linear Wengert tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in reverse, so inputs always have lower indices than outputs.

use super::conv::{self, conv_out, Geom};
use super::gemm::gemm;
use super::{check_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping of a weight-normalized direction tensor into output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WnLayout {
    /// `[Cout, ...]`: each output channel is one contiguous block.
    OutMajor,
    /// `[Cin, Cout, k, k]`: transposed-conv weights, output channel on axis 1.
    InMajor,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Log(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    ClampMin(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Prelu(Var, Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    WeightNorm {
        v: Var,
        g: Var,
        layout: WnLayout,
        norms: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: Geom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        geom: Geom,
    },
    Concat(Var, Var),
    Resize(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LogSoftmax(Var),
    Softmax(Var),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    RowMean(Var),
    MaxOf(Vec<Var>, Vec<u32>),
}

/// Op families, used for reporting and for fault injection in the gradient
/// oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Abs,
    Log,
    Square,
    Neg,
    Scale,
    AddScalar,
    ClampMin,
    Tanh,
    Sigmoid,
    Prelu,
    Sum,
    Mean,
    Max,
    WeightNorm,
    Conv2d,
    ConvTranspose2d,
    ConcatChannels,
    ResizeBilinear,
    Crop,
    Reshape,
    Linear,
    LogSoftmax,
    Softmax,
    SelectCols,
    GatherRows,
    RowMean,
    MaxOf,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Neg => "negate",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ClampMin => "clamp_min",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Prelu => "prelu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::WeightNorm => "weight_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::ResizeBilinear => "resize_bilinear",
            OpKind::Crop => "crop",
            OpKind::Reshape => "reshape",
            OpKind::Linear => "linear",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Softmax => "softmax",
            OpKind::SelectCols => "select_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::RowMean => "row_mean",
            OpKind::MaxOf => "max_of",
        }
    }

    pub fn all() -> &'static [OpKind] {
        &ALL_KINDS
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 31] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Abs,
    OpKind::Log,
    OpKind::Square,
    OpKind::Neg,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::ClampMin,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Prelu,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Max,
    OpKind::WeightNorm,
    OpKind::Conv2d,
    OpKind::ConvTranspose2d,
    OpKind::ConcatChannels,
    OpKind::ResizeBilinear,
    OpKind::Crop,
    OpKind::Reshape,
    OpKind::Linear,
    OpKind::LogSoftmax,
    OpKind::Softmax,
    OpKind::SelectCols,
    OpKind::GatherRows,
    OpKind::RowMean,
    OpKind::MaxOf,
];

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Abs(_) => OpKind::Abs,
            Op::Log(_) => OpKind::Log,
            Op::Square(_) => OpKind::Square,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Prelu(..) => OpKind::Prelu,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Max(..) => OpKind::Max,
            Op::WeightNorm { .. } => OpKind::WeightNorm,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::ConvT { .. } => OpKind::ConvTranspose2d,
            Op::Concat(..) => OpKind::ConcatChannels,
            Op::Resize(_) => OpKind::ResizeBilinear,
            Op::Crop { .. } => OpKind::Crop,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Linear { .. } => OpKind::Linear,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Softmax(_) => OpKind::Softmax,
            Op::SelectCols(..) => OpKind::SelectCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::RowMean(_) => OpKind::RowMean,
            Op::MaxOf(..) => OpKind::MaxOf,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn image_dims(what: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(format!("{what}: expected [B, C, H, W], got {shape:?}"))),
    }
}

fn matrix_dims(what: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("{what}: expected a matrix, got {shape:?}"))),
    }
}

/// Half-pixel-centred sampling table: source indices and right-hand weight.
fn resize_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of `kind` scale its upstream gradient by 1.5.
    /// Exists so the gradient oracle can be shown to catch a broken rule.
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records an owned tensor as a leaf without copying its data.
    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        check_shape(shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// First element of `v`'s value; meant for `[1]`-shaped losses.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone(), false).expect("tape node shape is valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&a| f(a)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, value, op, ng)
    }

    fn binary(&mut self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(what, self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.abs(), Op::Abs(x))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&a| !(a > T::zero())) {
            return Err(Error::NumericDomain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, |a| a.ln(), Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |a| -a, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    /// `max(x, c)`; the gradient passes where `x >= c`.
    pub fn clamp_min(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |a| if a >= c { a } else { c }, Op::ClampMin(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |a| {
                if a >= T::zero() {
                    T::one() / (T::one() + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    /// `max(0, x) + a·min(0, x)` with a learnable scalar slope `a` of shape `[1]`.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        if self.shape(a) != [1] {
            return Err(Error::shape(format!(
                "prelu slope must have shape [1], got {:?}",
                self.shape(a)
            )));
        }
        let slope = self.scalar(a);
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        let ng = self.ng(&[x, a]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Prelu(x, a), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x) {
            s += v;
        }
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut s = T::zero();
        for &v in self.value(x) {
            s += v;
        }
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s / T::lit(n as f64)], Op::Mean(x), ng)
    }

    /// Maximum element; the gradient goes to the lowest flat index attaining it.
    pub fn max(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let mut best = 0;
        for (i, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = i;
            }
        }
        let m = vals[best];
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![m], Op::Max(x, best), ng)
    }

    /// Effective weight `g·v/‖v‖₂`, norm taken per output channel.
    pub fn weight_norm(&mut self, v: Var, g: Var, layout: WnLayout) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("weight_norm needs rank ≥ 2, got {shape:?}")));
        }
        let (outer, cout) = match layout {
            WnLayout::OutMajor => (1, shape[0]),
            WnLayout::InMajor => (shape[0], shape[1]),
        };
        let inner: usize = match layout {
            WnLayout::OutMajor => shape[1..].iter().product(),
            WnLayout::InMajor => shape[2..].iter().product(),
        };
        if self.shape(g) != [cout] {
            return Err(Error::shape(format!(
                "weight_norm gain shape {:?} does not match {cout} output channels",
                self.shape(g)
            )));
        }
        let vv = self.value(v);
        let mut sq = vec![T::zero(); cout];
        for o_blk in 0..outer {
            for (o, s) in sq.iter_mut().enumerate() {
                let base = (o_blk * cout + o) * inner;
                for &e in &vv[base..base + inner] {
                    *s += e * e;
                }
            }
        }
        let norms: Vec<T> = sq.into_iter().map(|s| s.sqrt()).collect();
        if let Some(o) = norms.iter().position(|n| !(*n > T::zero())) {
            return Err(Error::NumericDomain(format!(
                "weight direction for output channel {o} has zero norm"
            )));
        }
        let gv = self.value(g);
        let mut w = vec![T::zero(); vv.len()];
        for o_blk in 0..outer {
            for o in 0..cout {
                let base = (o_blk * cout + o) * inner;
                let f = gv[o] / norms[o];
                for i in base..base + inner {
                    w[i] = f * vv[i];
                }
            }
        }
        let ng = self.ng(&[v, g]);
        Ok(self.push(shape, w, Op::WeightNorm { v, g, layout, norms }, ng))
    }

    /// Cross-correlation of `x [B, Cin, H, W]` with `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = image_dims("conv2d input", self.shape(x))?;
        let (cout, wcin, k, k2) = image_dims("conv2d weight", self.shape(w))?;
        if k != k2 {
            return Err(Error::shape("conv2d kernel must be square"));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(format!("conv2d bias must be [{cout}]")));
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: {h}x{wd} input with padding {pad} is smaller than kernel {k}"
                )))
            }
        };
        let geom = Geom {
            channels: cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv::conv_forward(self.value(x), self.value(w), self.value(b), batch, cout, &geom);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![batch, cout, oh, ow], out, Op::Conv { x, w, b, geom }, ng))
    }

    /// Transposed convolution of `x [B, Cin, H, W]` with `w [Cin, Cout, k, k]`;
    /// output side is `(H − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = image_dims("conv_transpose2d input", self.shape(x))?;
        let (wcin, cout, k, k2) = image_dims("conv_transpose2d weight", self.shape(w))?;
        if k != k2 {
            return Err(Error::shape("conv_transpose2d kernel must be square"));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(format!("conv_transpose2d bias must be [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("conv_transpose2d: padding consumes the whole output"));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = Geom {
            channels: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let out = conv::conv_t_forward(self.value(x), self.value(w), self.value(b), batch, cin, &geom);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![batch, cout, oh, ow], out, Op::ConvT { x, w, b, geom }, ng))
    }

    /// Weight-normalized conv2d: `v [Cout, Cin, k, k]`, `g [Cout]`.
    pub fn conv2d_wn(&mut self, x: Var, v: Var, g: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.weight_norm(v, g, WnLayout::OutMajor)?;
        self.conv2d(x, w, b, stride, pad)
    }

    /// Weight-normalized transposed conv: `v [Cin, Cout, k, k]`, `g [Cout]`.
    pub fn conv_transpose2d_wn(
        &mut self,
        x: Var,
        v: Var,
        g: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = self.weight_norm(v, g, WnLayout::InMajor)?;
        self.conv_transpose2d(x, w, b, stride, pad)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = image_dims("concat_channels", self.shape(a))?;
        let (bb, cb, hb, wb) = image_dims("concat_channels", self.shape(b))?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&self.value(a)[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b)[n * cb * plane..(n + 1) * cb * plane]);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![ba, ca + cb, ha, wa], out, Op::Concat(a, b), ng))
    }

    /// Bilinear resize with half-pixel-centred sampling and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = image_dims("resize_bilinear", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear: output dims must be positive"));
        }
        let ty = resize_table(h, out_h);
        let tx = resize_table(w, out_w);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in xv.chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                let fy = T::lit(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::lit(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![b, c, out_h, out_w], out, Op::Resize(x), ng))
    }

    /// Spatial window `[top, top+h) × [left, left+w)` of every plane.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (b, c, ih, iw) = image_dims("crop", self.shape(x))?;
        if h == 0 || w == 0 || top + h > ih || left + w > iw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top}, {left}) does not fit a {ih}x{iw} image"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in xv.chunks(ih * iw) {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * iw + left..y * iw + left + w]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![b, c, h, w], out, Op::Crop { x, top, left }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape, self.value(x).len())?;
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// `x [B, K] · wᵀ + b` with `w [N, K]`, `b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, k) = matrix_dims("linear input", self.shape(x))?;
        let (n, wk) = matrix_dims("linear weight", self.shape(w))?;
        if wk != k || self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(x), false, self.value(w), true, T::zero(), &mut out);
        let bv = self.value(b);
        for row in out.chunks_mut(n) {
            for (o, bias) in row.iter_mut().zip(bv) {
                *o += *bias;
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![rows, n], out, Op::Linear { x, w, b }, ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = matrix_dims("log_softmax", self.shape(x))?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for &v in row {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), ng))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = matrix_dims("softmax", self.shape(x))?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / s);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    /// Columns `idx` of a `[B, N]` matrix, in the given order.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, n) = matrix_dims("select_cols", self.shape(x))?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape(format!("select_cols: indices {idx:?} out of range for {n} columns")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * idx.len());
        for row in xv.chunks(n) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows, idx.len()], out, Op::SelectCols(x, idx.to_vec()), ng))
    }

    /// One element per row of a `[B, N]` matrix: `out[r] = x[r, idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, n) = matrix_dims("gather_rows", self.shape(x))?;
        if idx.len() != rows || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows: one in-range index per row required"));
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * n + i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows], out, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Mean of each row of a `[B, N]` matrix, giving `[B]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = matrix_dims("row_mean", self.shape(x))?;
        let inv = T::one() / T::lit(n as f64);
        let out = self
            .value(x)
            .chunks(n)
            .map(|row| {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                s * inv
            })
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows], out, Op::RowMean(x), ng))
    }

    /// Elementwise maximum across same-shaped tensors; ties go to the
    /// earliest operand.
    pub fn max_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("max_of needs at least one operand"))?;
        for &x in &xs[1..] {
            same_shape("max_of", self.shape(first), self.shape(x))?;
        }
        let len = self.value(first).len();
        let mut out = self.value(first).to_vec();
        let mut arg = vec![0u32; len];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            for (i, &v) in self.value(x).iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    arg[i] = k as u32;
                }
            }
        }
        let ng = self.ng(xs);
        Ok(self.push(self.shape(first).to_vec(), out, Op::MaxOf(xs.to_vec(), arg), ng))
    }

    /// Reverse pass from a `[1]`-shaped loss. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                match self.leaf_grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += *g),
                    None => self.leaf_grads[i] = Some(gy),
                }
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                let f = T::lit(1.5);
                gy.iter_mut().for_each(|g| *g *= f);
            }
            self.propagate(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= *d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += *d * *y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += *d * *x;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        if *x > T::zero() {
                            *g += *d;
                        } else if *x < T::zero() {
                            *g -= *d;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        *g += *d / *x;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                let two = T::lit(2.0);
                acc(*x, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        *g += two * *x * *d;
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= *d)),
            Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += *d * *c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::ClampMin(x, c) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        if *x >= *c {
                            *g += *d;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += *d * (T::one() - *y * *y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += *d * *y * (T::one() - *y);
                    }
                });
            }
            Op::Prelu(x, a) => {
                let xv = val(*x);
                let slope = val(*a)[0];
                acc(*x, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        *g += if *x > T::zero() { *d } else { slope * *d };
                    }
                });
                acc(*a, &mut |g| {
                    let mut s = T::zero();
                    for (d, x) in gy.iter().zip(xv) {
                        if *x <= T::zero() {
                            s += *d * *x;
                        }
                    }
                    g[0] += s;
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::Max(x, idx) => acc(*x, &mut |g| g[*idx] += gy[0]),
            Op::WeightNorm { v, g: gain, layout, norms } => {
                let vv = val(*v);
                let gv = val(*gain);
                let shape = &nodes[v.0].shape;
                let (outer, cout, inner) = match layout {
                    WnLayout::OutMajor => (1, shape[0], shape[1..].iter().product::<usize>()),
                    WnLayout::InMajor => (shape[0], shape[1], shape[2..].iter().product::<usize>()),
                };
                // dot[o] = Σ dw·v over channel o
                let mut dot = vec![T::zero(); cout];
                for ob in 0..outer {
                    for (o, d) in dot.iter_mut().enumerate() {
                        let base = (ob * cout + o) * inner;
                        for j in base..base + inner {
                            *d += gy[j] * vv[j];
                        }
                    }
                }
                acc(*gain, &mut |g| {
                    for o in 0..cout {
                        g[o] += dot[o] / norms[o];
                    }
                });
                acc(*v, &mut |g| {
                    for ob in 0..outer {
                        for o in 0..cout {
                            let base = (ob * cout + o) * inner;
                            let f = gv[o] / norms[o];
                            let c = dot[o] / (norms[o] * norms[o]);
                            for j in base..base + inner {
                                g[j] += f * (gy[j] - c * vv[j]);
                            }
                        }
                    }
                });
            }
            Op::Conv { x, w, b, geom } => {
                let batch = nodes[x.0].shape[0];
                let cout = nodes[w.0].shape[0];
                let r = conv::conv_backward(val(*x), val(*w), gy, batch, cout, geom, (wants(*x), wants(*w), wants(*b)));
                if let Some(dx) = r.dx {
                    acc(*x, &mut |g| add_into(g, &dx));
                }
                if let Some(dw) = r.dw {
                    acc(*w, &mut |g| add_into(g, &dw));
                }
                if let Some(db) = r.db {
                    acc(*b, &mut |g| add_into(g, &db));
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let batch = nodes[x.0].shape[0];
                let cin = nodes[x.0].shape[1];
                let r = conv::conv_t_backward(val(*x), val(*w), gy, batch, cin, geom, (wants(*x), wants(*w), wants(*b)));
                if let Some(dx) = r.dx {
                    acc(*x, &mut |g| add_into(g, &dx));
                }
                if let Some(dw) = r.dw {
                    acc(*w, &mut |g| add_into(g, &dw));
                }
                if let Some(db) = r.db {
                    acc(*b, &mut |g| add_into(g, &db));
                }
            }
            Op::Concat(a, b) => {
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let plane = sa[2] * sa[3];
                let (la, lb) = (sa[1] * plane, sb[1] * plane);
                let batch = sa[0];
                acc(*a, &mut |g| {
                    for n in 0..batch {
                        let src = &gy[n * (la + lb)..n * (la + lb) + la];
                        add_into(&mut g[n * la..(n + 1) * la], src);
                    }
                });
                acc(*b, &mut |g| {
                    for n in 0..batch {
                        let src = &gy[n * (la + lb) + la..(n + 1) * (la + lb)];
                        add_into(&mut g[n * lb..(n + 1) * lb], src);
                    }
                });
            }
            Op::Resize(x) => {
                let s = &nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let ty = resize_table(h, oh);
                let tx = resize_table(w, ow);
                acc(*x, &mut |g| {
                    for (plane, gplane) in g.chunks_mut(h * w).zip(gy.chunks(oh * ow)) {
                        let mut k = 0;
                        for &(y0, y1, fy) in &ty {
                            let fy = T::lit(fy);
                            for &(x0, x1, fx) in &tx {
                                let fx = T::lit(fx);
                                let d = gplane[k];
                                k += 1;
                                let top = d * (T::one() - fy);
                                let bot = d * fy;
                                plane[y0 * w + x0] += top * (T::one() - fx);
                                plane[y0 * w + x1] += top * fx;
                                plane[y1 * w + x0] += bot * (T::one() - fx);
                                plane[y1 * w + x1] += bot * fx;
                            }
                        }
                    }
                });
            }
            Op::Crop { x, top, left } => {
                let s = &nodes[x.0].shape;
                let (ih, iw) = (s[2], s[3]);
                let (h, w) = (node.shape[2], node.shape[3]);
                acc(*x, &mut |g| {
                    for (plane, gplane) in g.chunks_mut(ih * iw).zip(gy.chunks(h * w)) {
                        for y in 0..h {
                            let dst = &mut plane[(top + y) * iw + left..(top + y) * iw + left + w];
                            add_into(dst, &gplane[y * w..(y + 1) * w]);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (rows, k) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let n = nodes[w.0].shape[0];
                acc(*x, &mut |g| gemm(rows, n, k, gy, false, val(*w), false, T::one(), g));
                acc(*w, &mut |g| gemm(n, rows, k, gy, true, val(*x), false, T::one(), g));
                acc(*b, &mut |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = node.shape[1];
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(n).zip(gy.chunks(n)).zip(yv.chunks(n)) {
                        let mut s = T::zero();
                        for &d in dyrow {
                            s += d;
                        }
                        for ((g, d), y) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += *d - y.exp() * s;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.shape[1];
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(n).zip(gy.chunks(n)).zip(yv.chunks(n)) {
                        let mut s = T::zero();
                        for (d, y) in dyrow.iter().zip(yrow) {
                            s += *d * *y;
                        }
                        for ((g, d), y) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += *y * (*d - s);
                        }
                    }
                });
            }
            Op::SelectCols(x, idx) => {
                let n = nodes[x.0].shape[1];
                acc(*x, &mut |g| {
                    for (grow, dyrow) in g.chunks_mut(n).zip(gy.chunks(idx.len())) {
                        for (&i, d) in idx.iter().zip(dyrow) {
                            grow[i] += *d;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = nodes[x.0].shape[1];
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        g[r * n + i] += gy[r];
                    }
                });
            }
            Op::RowMean(x) => {
                let n = nodes[x.0].shape[1];
                let inv = T::one() / T::lit(n as f64);
                acc(*x, &mut |g| {
                    for (grow, d) in g.chunks_mut(n).zip(gy) {
                        grow.iter_mut().for_each(|g| *g += *d * inv);
                    }
                });
            }
            Op::MaxOf(xs, arg) => {
                for (k, &x) in xs.iter().enumerate() {
                    acc(x, &mut |g| {
                        for (i, &a) in arg.iter().enumerate() {
                            if a as usize == k {
                                g[i] += gy[i];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
