//! Forward and backward rules for every primitive kind.
//!
//! Layout conventions: images are `[batch, channels, height, width]`,
//! convolution weights are `[out_channels, in_channels, kh, kw]`, and
//! matrices are `[rows, cols]`. Elementwise binary ops broadcast the
//! second operand against the first, numpy style (right-aligned, extents
//! equal or 1).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{AutodiffError, Tensor};

/// Primitive kinds understood by [`super::Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Add,
    Multiply,
    Scale,
    MatMul,
    Conv2d,
    MaxPool2d,
    Relu,
    Abs,
    L2Normalize,
    CosineDistance,
    SoftmaxCrossEntropy,
    SigmoidCrossEntropy,
    ReverseHuber,
    ReduceMean,
    ReduceSum,
    Concat,
    Flatten,
    Reshape,
    SliceRows,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 19] = [
        PrimitiveKind::Add,
        PrimitiveKind::Multiply,
        PrimitiveKind::Scale,
        PrimitiveKind::MatMul,
        PrimitiveKind::Conv2d,
        PrimitiveKind::MaxPool2d,
        PrimitiveKind::Relu,
        PrimitiveKind::Abs,
        PrimitiveKind::L2Normalize,
        PrimitiveKind::CosineDistance,
        PrimitiveKind::SoftmaxCrossEntropy,
        PrimitiveKind::SigmoidCrossEntropy,
        PrimitiveKind::ReverseHuber,
        PrimitiveKind::ReduceMean,
        PrimitiveKind::ReduceSum,
        PrimitiveKind::Concat,
        PrimitiveKind::Flatten,
        PrimitiveKind::Reshape,
        PrimitiveKind::SliceRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Multiply => "multiply",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::MaxPool2d => "maxpool2d",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Abs => "abs",
            PrimitiveKind::L2Normalize => "l2-normalize",
            PrimitiveKind::CosineDistance => "cosine-distance",
            PrimitiveKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
            PrimitiveKind::SigmoidCrossEntropy => "sigmoid-cross-entropy",
            PrimitiveKind::ReverseHuber => "reverse-huber",
            PrimitiveKind::ReduceMean => "reduce-mean",
            PrimitiveKind::ReduceSum => "reduce-sum",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Flatten => "flatten",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::SliceRows => "slice-rows",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AutodiffError::UnknownKind(s.to_string()))
    }
}

/// Attribute value for the string-keyed construction path.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(usize),
    Real(f64),
    Ints(Vec<usize>),
    Reals(Vec<f64>),
}

pub type AttrMap = BTreeMap<String, AttrValue>;

/// A primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Multiply,
    Scale(f64),
    MatMul,
    Conv2d {
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Elementwise absolute value, subgradient 0 at 0.
    Abs,
    /// Normalizes each row (last axis) to unit Euclidean norm.
    L2Normalize,
    /// Row-wise `1 - cos(u, v)`; output has one value per row.
    CosineDistance,
    /// Mean cross-entropy with the class axis at position 1.
    SoftmaxCrossEntropy {
        targets: Vec<usize>,
    },
    /// Mean binary cross-entropy on logits.
    SigmoidCrossEntropy {
        targets: Vec<f64>,
    },
    /// Elementwise berHu. `threshold: None` is resolved to `0.2 * max|x|`
    /// when the node is created and then held fixed.
    ReverseHuber {
        threshold: Option<f64>,
    },
    ReduceMean,
    ReduceSum,
    Concat {
        axis: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    SliceRows {
        start: usize,
        end: usize,
    },
}

fn attr_int(attrs: &AttrMap, key: &str, default: Option<usize>) -> Result<usize, AutodiffError> {
    match attrs.get(key) {
        Some(AttrValue::Int(v)) => Ok(*v),
        Some(other) => Err(AutodiffError::BadAttribute {
            key: key.to_string(),
            detail: format!("expected integer, got {other:?}"),
        }),
        None => default.ok_or_else(|| AutodiffError::BadAttribute {
            key: key.to_string(),
            detail: "missing".into(),
        }),
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Add => PrimitiveKind::Add,
            Primitive::Multiply => PrimitiveKind::Multiply,
            Primitive::Scale(_) => PrimitiveKind::Scale,
            Primitive::MatMul => PrimitiveKind::MatMul,
            Primitive::Conv2d { .. } => PrimitiveKind::Conv2d,
            Primitive::MaxPool2d { .. } => PrimitiveKind::MaxPool2d,
            Primitive::Relu => PrimitiveKind::Relu,
            Primitive::Abs => PrimitiveKind::Abs,
            Primitive::L2Normalize => PrimitiveKind::L2Normalize,
            Primitive::CosineDistance => PrimitiveKind::CosineDistance,
            Primitive::SoftmaxCrossEntropy { .. } => PrimitiveKind::SoftmaxCrossEntropy,
            Primitive::SigmoidCrossEntropy { .. } => PrimitiveKind::SigmoidCrossEntropy,
            Primitive::ReverseHuber { .. } => PrimitiveKind::ReverseHuber,
            Primitive::ReduceMean => PrimitiveKind::ReduceMean,
            Primitive::ReduceSum => PrimitiveKind::ReduceSum,
            Primitive::Concat { .. } => PrimitiveKind::Concat,
            Primitive::Flatten => PrimitiveKind::Flatten,
            Primitive::Reshape { .. } => PrimitiveKind::Reshape,
            Primitive::SliceRows { .. } => PrimitiveKind::SliceRows,
        }
    }

    /// Builds a primitive from a kind name and an attribute map.
    pub fn from_attrs(kind: &str, attrs: &AttrMap) -> Result<Self, AutodiffError> {
        let kind: PrimitiveKind = kind.parse()?;
        let bad = |key: &str, detail: &str| AutodiffError::BadAttribute {
            key: key.to_string(),
            detail: detail.to_string(),
        };
        Ok(match kind {
            PrimitiveKind::Add => Primitive::Add,
            PrimitiveKind::Multiply => Primitive::Multiply,
            PrimitiveKind::Scale => match attrs.get("factor") {
                Some(AttrValue::Real(f)) => Primitive::Scale(*f),
                _ => return Err(bad("factor", "expected real")),
            },
            PrimitiveKind::MatMul => Primitive::MatMul,
            PrimitiveKind::Conv2d => Primitive::Conv2d {
                stride: attr_int(attrs, "stride", Some(1))?,
                padding: attr_int(attrs, "padding", Some(0))?,
                dilation: attr_int(attrs, "dilation", Some(1))?,
            },
            PrimitiveKind::MaxPool2d => {
                let kernel = attr_int(attrs, "kernel", None)?;
                Primitive::MaxPool2d {
                    kernel,
                    stride: attr_int(attrs, "stride", Some(kernel))?,
                }
            }
            PrimitiveKind::Relu => Primitive::Relu,
            PrimitiveKind::Abs => Primitive::Abs,
            PrimitiveKind::L2Normalize => Primitive::L2Normalize,
            PrimitiveKind::CosineDistance => Primitive::CosineDistance,
            PrimitiveKind::SoftmaxCrossEntropy => match attrs.get("targets") {
                Some(AttrValue::Ints(t)) => Primitive::SoftmaxCrossEntropy { targets: t.clone() },
                _ => return Err(bad("targets", "expected integer list")),
            },
            PrimitiveKind::SigmoidCrossEntropy => match attrs.get("targets") {
                Some(AttrValue::Reals(t)) => Primitive::SigmoidCrossEntropy { targets: t.clone() },
                _ => return Err(bad("targets", "expected real list")),
            },
            PrimitiveKind::ReverseHuber => match attrs.get("threshold") {
                Some(AttrValue::Real(c)) => Primitive::ReverseHuber { threshold: Some(*c) },
                None => Primitive::ReverseHuber { threshold: None },
                _ => return Err(bad("threshold", "expected real")),
            },
            PrimitiveKind::ReduceMean => Primitive::ReduceMean,
            PrimitiveKind::ReduceSum => Primitive::ReduceSum,
            PrimitiveKind::Concat => Primitive::Concat {
                axis: attr_int(attrs, "axis", Some(0))?,
            },
            PrimitiveKind::Flatten => Primitive::Flatten,
            PrimitiveKind::Reshape => match attrs.get("shape") {
                Some(AttrValue::Ints(s)) => Primitive::Reshape { shape: s.clone() },
                _ => return Err(bad("shape", "expected integer list")),
            },
            PrimitiveKind::SliceRows => Primitive::SliceRows {
                start: attr_int(attrs, "start", None)?,
                end: attr_int(attrs, "end", None)?,
            },
        })
    }

    /// Fills in attributes that depend on the forward inputs.
    pub(crate) fn resolve(&mut self, inputs: &[&Tensor]) {
        if let Primitive::ReverseHuber { threshold } = self {
            if threshold.is_none() {
                if let Some(x) = inputs.first() {
                    *threshold = Some(0.2 * x.max_abs());
                }
            }
        }
    }
}

fn mismatch(kind: PrimitiveKind, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        primitive: kind.name(),
        detail,
    }
}

fn expect_arity(kind: PrimitiveKind, inputs: &[&Tensor], n: usize) -> Result<(), AutodiffError> {
    if inputs.len() != n {
        return Err(AutodiffError::Arity {
            primitive: kind.name(),
            expected: n,
            got: inputs.len(),
        });
    }
    Ok(())
}

/// For each element of `lhs`, the index of the matching element of the
/// broadcast `rhs`.
fn broadcast_map(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let offset = lhs.len() - rhs.len();
    let mut rhs_strides = vec![0usize; lhs.len()];
    let mut stride = 1;
    for (i, &d) in rhs.iter().enumerate().rev() {
        let l = lhs[offset + i];
        if d == l {
            rhs_strides[offset + i] = stride;
        } else if d != 1 {
            return None;
        }
        stride *= d;
    }
    let numel: usize = lhs.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; lhs.len()];
    let mut r = 0usize;
    for _ in 0..numel {
        out.push(r);
        for axis in (0..lhs.len()).rev() {
            idx[axis] += 1;
            r += rhs_strides[axis];
            if idx[axis] < lhs[axis] {
                break;
            }
            r -= rhs_strides[axis] * lhs[axis];
            idx[axis] = 0;
        }
    }
    Some(out)
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl ConvGeom {
    fn new(
        x: &Tensor,
        k: &Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self, AutodiffError> {
        let kind = PrimitiveKind::Conv2d;
        if stride == 0 || dilation == 0 {
            return Err(mismatch(
                kind,
                format!("stride {stride} and dilation {dilation} must be >= 1"),
            ));
        }
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(mismatch(
                kind,
                format!("input {xs:?} and kernel {ks:?} must both be 4-d"),
            ));
        }
        if xs[1] != ks[1] {
            return Err(mismatch(
                kind,
                format!("input channels {} != kernel in-channels {}", xs[1], ks[1]),
            ));
        }
        let oh = conv_out(xs[2], ks[2], stride, padding, dilation);
        let ow = conv_out(xs[3], ks[3], stride, padding, dilation);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(mismatch(
                kind,
                format!("kernel {ks:?} (dilation {dilation}) larger than padded input {xs:?}"),
            ));
        };
        Ok(Self {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh,
            ow,
            stride,
            padding,
            dilation,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    out[orow + ox] += wv * x[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(g: &ConvGeom, x: &[f64], k: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.oh * g.ow;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = k[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    let go = gout[orow + ox];
                                    acc += go * x[xrow + ix];
                                    gx[xrow + ix] += go * wv;
                                }
                            }
                        }
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Output index of the max element per pooling window (first on ties).
fn maxpool_argmax(x: &Tensor, kernel: usize, stride: usize) -> Result<(Vec<usize>, Vec<usize>), AutodiffError> {
    let kind = PrimitiveKind::MaxPool2d;
    let s = x.shape();
    if s.len() != 4 {
        return Err(mismatch(kind, format!("input {s:?} must be 4-d")));
    }
    if kernel == 0 || stride == 0 {
        return Err(mismatch(kind, "kernel and stride must be >= 1".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (Some(oh), Some(ow)) = (conv_out(h, kernel, stride, 0, 1), conv_out(w, kernel, stride, 0, 1)) else {
        return Err(mismatch(kind, format!("kernel {kernel} larger than input {s:?}")));
    };
    let data = x.data();
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                arg.push(best);
            }
        }
    }
    Ok((arg, vec![n, c, oh, ow]))
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positions per class-axis layout `[n, k, rest...]` -> (n, k, rest).
fn class_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// berHu value at `x` for threshold `c`.
pub fn reverse_huber(x: f64, c: f64) -> f64 {
    let a = x.abs();
    if c <= 0.0 || a <= c {
        a
    } else {
        (x * x + c * c) / (2.0 * c)
    }
}

fn reverse_huber_grad(x: f64, c: f64) -> f64 {
    if c <= 0.0 || x.abs() <= c {
        sign(x)
    } else {
        x / c
    }
}

fn concat_geom(kind: PrimitiveKind, inputs: &[&Tensor], axis: usize) -> Result<(usize, Vec<usize>, usize, Vec<usize>), AutodiffError> {
    let first = inputs.first().ok_or(AutodiffError::Arity {
        primitive: kind.name(),
        expected: 1,
        got: 0,
    })?;
    let s0 = first.shape();
    if axis >= s0.len() {
        return Err(mismatch(kind, format!("axis {axis} out of range for {s0:?}")));
    }
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let s = t.shape();
        let ok = s.len() == s0.len()
            && s.iter()
                .zip(s0)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(mismatch(kind, format!("{s:?} incompatible with {s0:?} on axis {axis}")));
        }
        widths.push(s[axis]);
    }
    let outer: usize = s0[..axis].iter().product();
    let inner: usize = s0[axis + 1..].iter().product();
    let mut out_shape = s0.to_vec();
    out_shape[axis] = widths.iter().sum();
    Ok((outer, widths, inner, out_shape))
}

/// Evaluates a primitive on concrete inputs.
pub fn forward(p: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let kind = p.kind();
    match p {
        Primitive::Add | Primitive::Multiply => {
            expect_arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let map = broadcast_map(a.shape(), b.shape()).ok_or_else(|| {
                mismatch(kind, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()))
            })?;
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .zip(&map)
                .map(|(&x, &j)| if kind == PrimitiveKind::Add { x + bd[j] } else { x * bd[j] })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Primitive::Scale(f) => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].map(|v| v * f))
        }
        Primitive::MatMul => {
            expect_arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch(kind, format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Primitive::Conv2d {
            stride,
            padding,
            dilation,
        } => {
            expect_arity(kind, inputs, 2)?;
            let g = ConvGeom::new(inputs[0], inputs[1], *stride, *padding, *dilation)?;
            let out = conv2d_forward(&g, inputs[0].data(), inputs[1].data());
            Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
        }
        Primitive::MaxPool2d { kernel, stride } => {
            expect_arity(kind, inputs, 1)?;
            let (arg, shape) = maxpool_argmax(inputs[0], *kernel, *stride)?;
            let d = inputs[0].data();
            Tensor::new(shape, arg.iter().map(|&i| d[i]).collect())
        }
        Primitive::Relu => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].map(|v| v.max(0.0)))
        }
        Primitive::Abs => {
            expect_arity(kind, inputs, 1)?;
            Ok(inputs[0].map(f64::abs))
        }
        Primitive::L2Normalize => {
            expect_arity(kind, inputs, 1)?;
            let x = inputs[0];
            let (rows, d) = row_split(x.shape());
            let mut out = Vec::with_capacity(x.len());
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let nrm = norm(row);
                if nrm == 0.0 {
                    return Err(AutodiffError::ZeroNorm { primitive: kind.name() });
                }
                out.extend(row.iter().map(|v| v / nrm));
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::CosineDistance => {
            expect_arity(kind, inputs, 2)?;
            let (u, v) = (inputs[0], inputs[1]);
            if u.shape() != v.shape() {
                return Err(mismatch(kind, format!("{:?} vs {:?}", u.shape(), v.shape())));
            }
            let (rows, d) = row_split(u.shape());
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let (a, b) = (&u.data()[r * d..(r + 1) * d], &v.data()[r * d..(r + 1) * d]);
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(AutodiffError::ZeroNorm { primitive: kind.name() });
                }
                out.push(1.0 - dot(a, b) / (na * nb));
            }
            Tensor::new(vec![rows], out)
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            expect_arity(kind, inputs, 1)?;
            let x = inputs[0];
            let (n, k, rest) = class_layout(x.shape())
                .ok_or_else(|| mismatch(kind, format!("logits {:?} need a class axis", x.shape())))?;
            if targets.len() != n * rest {
                return Err(mismatch(
                    kind,
                    format!("{} targets for {} positions of {:?}", targets.len(), n * rest, x.shape()),
                ));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= k) {
                return Err(mismatch(kind, format!("target {t} outside {k} classes")));
            }
            let d = x.data();
            let mut total = 0.0;
            for b in 0..n {
                for r in 0..rest {
                    let at = |c: usize| d[(b * k + c) * rest + r];
                    let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                    total += lse - at(targets[b * rest + r]);
                }
            }
            Ok(Tensor::scalar(total / (n * rest) as f64))
        }
        Primitive::SigmoidCrossEntropy { targets } => {
            expect_arity(kind, inputs, 1)?;
            let x = inputs[0];
            if targets.len() != x.len() {
                return Err(mismatch(kind, format!("{} targets for logits {:?}", targets.len(), x.shape())));
            }
            let total: f64 = x
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| softplus(z) - z * t)
                .sum();
            Ok(Tensor::scalar(total / x.len() as f64))
        }
        Primitive::ReverseHuber { threshold } => {
            expect_arity(kind, inputs, 1)?;
            let c = threshold.unwrap_or_else(|| 0.2 * inputs[0].max_abs());
            Ok(inputs[0].map(|v| reverse_huber(v, c)))
        }
        Primitive::ReduceMean => {
            expect_arity(kind, inputs, 1)?;
            let x = inputs[0];
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        }
        Primitive::ReduceSum => {
            expect_arity(kind, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Primitive::Concat { axis } => {
            let (outer, widths, inner, shape) = concat_geom(kind, inputs, *axis)?;
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for (t, &w) in inputs.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[o * w * inner..(o + 1) * w * inner]);
                }
            }
            Tensor::new(shape, out)
        }
        Primitive::Flatten => {
            expect_arity(kind, inputs, 1)?;
            let s = inputs[0].shape();
            let rest: usize = s[1..].iter().product();
            inputs[0].reshaped(&[s[0], rest])
        }
        Primitive::Reshape { shape } => {
            expect_arity(kind, inputs, 1)?;
            inputs[0]
                .reshaped(shape)
                .map_err(|_| mismatch(kind, format!("{:?} -> {shape:?}", inputs[0].shape())))
        }
        Primitive::SliceRows { start, end } => {
            expect_arity(kind, inputs, 1)?;
            let s = inputs[0].shape();
            if start >= end || *end > s[0] {
                return Err(mismatch(kind, format!("rows {start}..{end} of {s:?}")));
            }
            let row: usize = s[1..].iter().product();
            let mut shape = s.to_vec();
            shape[0] = end - start;
            Tensor::new(shape, inputs[0].data()[start * row..end * row].to_vec())
        }
    }
}

/// Vector-Jacobian products: the gradient with respect to each input given
/// the gradient of the output.
pub fn backward(
    p: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &Tensor,
) -> Result<Vec<Tensor>, AutodiffError> {
    let shaped = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data);
    Ok(match p {
        Primitive::Add | Primitive::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            let map = broadcast_map(a.shape(), b.shape()).expect("validated in forward");
            let mut gb = vec![0.0; b.len()];
            let ga = if matches!(p, Primitive::Add) {
                for (g, &j) in gout.data().iter().zip(&map) {
                    gb[j] += g;
                }
                gout.data().to_vec()
            } else {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = Vec::with_capacity(a.len());
                for (i, (g, &j)) in gout.data().iter().zip(&map).enumerate() {
                    ga.push(g * bd[j]);
                    gb[j] += g * ad[i];
                }
                ga
            };
            vec![shaped(a, ga)?, shaped(b, gb)?]
        }
        Primitive::Scale(f) => vec![gout.map(|g| g * f)],
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd, gd) = (a.data(), b.data(), gout.data());
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    ga[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                    let av = ad[i * k + p];
                    for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *o += av * g;
                    }
                }
            }
            vec![shaped(a, ga)?, shaped(b, gb)?]
        }
        Primitive::Conv2d {
            stride,
            padding,
            dilation,
        } => {
            let g = ConvGeom::new(inputs[0], inputs[1], *stride, *padding, *dilation)?;
            let (gx, gk) = conv2d_backward(&g, inputs[0].data(), inputs[1].data(), gout.data());
            vec![shaped(inputs[0], gx)?, shaped(inputs[1], gk)?]
        }
        Primitive::MaxPool2d { kernel, stride } => {
            let (arg, _) = maxpool_argmax(inputs[0], *kernel, *stride)?;
            let mut gx = vec![0.0; inputs[0].len()];
            for (g, &i) in gout.data().iter().zip(&arg) {
                gx[i] += g;
            }
            vec![shaped(inputs[0], gx)?]
        }
        Primitive::Relu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![shaped(x, data)?]
        }
        Primitive::Abs => {
            let x = inputs[0];
            let data = x.data().iter().zip(gout.data()).map(|(&v, &g)| sign(v) * g).collect();
            vec![shaped(x, data)?]
        }
        Primitive::L2Normalize => {
            let x = inputs[0];
            let (rows, d) = row_split(x.shape());
            let mut gx = Vec::with_capacity(x.len());
            for r in 0..rows {
                let span = r * d..(r + 1) * d;
                let nrm = norm(&x.data()[span.clone()]);
                let y = &output.data()[span.clone()];
                let gy = &gout.data()[span];
                let proj = dot(y, gy);
                gx.extend(y.iter().zip(gy).map(|(yv, gv)| (gv - yv * proj) / nrm));
            }
            vec![shaped(x, gx)?]
        }
        Primitive::CosineDistance => {
            let (u, v) = (inputs[0], inputs[1]);
            let (rows, d) = row_split(u.shape());
            let mut gu = Vec::with_capacity(u.len());
            let mut gv = Vec::with_capacity(v.len());
            for r in 0..rows {
                let (a, b) = (&u.data()[r * d..(r + 1) * d], &v.data()[r * d..(r + 1) * d]);
                let (na, nb) = (norm(a), norm(b));
                let cos = dot(a, b) / (na * nb);
                let g = gout.data()[r];
                // d(1 - cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
                gu.extend(a.iter().zip(b).map(|(x, y)| -g * (y / (na * nb) - cos * x / (na * na))));
                gv.extend(a.iter().zip(b).map(|(x, y)| -g * (x / (na * nb) - cos * y / (nb * nb))));
            }
            vec![shaped(u, gu)?, shaped(v, gv)?]
        }
        Primitive::SoftmaxCrossEntropy { targets } => {
            let x = inputs[0];
            let (n, k, rest) = class_layout(x.shape()).expect("validated in forward");
            let d = x.data();
            let scale = gout.item() / (n * rest) as f64;
            let mut gx = vec![0.0; x.len()];
            for b in 0..n {
                for r in 0..rest {
                    let idx = |c: usize| (b * k + c) * rest + r;
                    let m = (0..k).map(|c| d[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|c| (d[idx(c)] - m).exp()).sum();
                    for c in 0..k {
                        let p = (d[idx(c)] - m).exp() / z;
                        let t = if c == targets[b * rest + r] { 1.0 } else { 0.0 };
                        gx[idx(c)] = scale * (p - t);
                    }
                }
            }
            vec![shaped(x, gx)?]
        }
        Primitive::SigmoidCrossEntropy { targets } => {
            let x = inputs[0];
            let scale = gout.item() / x.len() as f64;
            let data = x
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &t)| scale * (sigmoid(z) - t))
                .collect();
            vec![shaped(x, data)?]
        }
        Primitive::ReverseHuber { threshold } => {
            let x = inputs[0];
            let c = threshold.unwrap_or_else(|| 0.2 * x.max_abs());
            let data = x
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&v, &g)| g * reverse_huber_grad(v, c))
                .collect();
            vec![shaped(x, data)?]
        }
        Primitive::ReduceMean => {
            let g = gout.item() / inputs[0].len() as f64;
            vec![Tensor::filled(inputs[0].shape(), g)]
        }
        Primitive::ReduceSum => vec![Tensor::filled(inputs[0].shape(), gout.item())],
        Primitive::Concat { axis } => {
            let (outer, widths, inner, _) = concat_geom(p.kind(), inputs, *axis)?;
            let total: usize = widths.iter().sum();
            let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&gout.data()[off..off + w * inner]);
                    off += w * inner;
                }
            }
            inputs
                .iter()
                .zip(grads)
                .map(|(t, g)| shaped(t, g))
                .collect::<Result<_, _>>()?
        }
        Primitive::Flatten | Primitive::Reshape { .. } => vec![shaped(inputs[0], gout.data().to_vec())?],
        Primitive::SliceRows { start, end } => {
            let x = inputs[0];
            let row: usize = x.shape()[1..].iter().product();
            let mut gx = vec![0.0; x.len()];
            gx[start * row..end * row].copy_from_slice(gout.data());
            vec![shaped(x, gx)?]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = forward(&Primitive::Relu, &[&Tensor::from_vec(vec![-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    /// Direct transcription of the convolution sum, used as the oracle.
    fn hand_conv(x: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let oh = x.len() - k.len() + 1;
        let ow = x[0].len() - k[0].len() + 1;
        (0..oh)
            .map(|i| {
                (0..ow)
                    .map(|j| {
                        let mut s = 0.0;
                        for (a, krow) in k.iter().enumerate() {
                            for (b, kv) in krow.iter().enumerate() {
                                s += kv * x[i + a][j + b];
                            }
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn conv2d_all_ones_matches_hand_convolution() {
        let oracle = hand_conv(&vec![vec![1.0; 3]; 3], &vec![vec![1.0; 2]; 2]);
        assert_eq!(oracle, vec![vec![4.0, 4.0], vec![4.0, 4.0]]);
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = forward(&Primitive::Conv2d { stride: 1, padding: 0, dilation: 1 }, &[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv2d_dilation_reaches_spaced_taps() {
        // 5x5 ramp, 2x2 kernel with dilation 2 sums x[i][j]+x[i][j+2]+x[i+2][j]+x[i+2][j+2].
        let x = t(&[1, 1, 5, 5], &(0..25).map(f64::from).collect::<Vec<_>>());
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = forward(&Primitive::Conv2d { stride: 1, padding: 0, dilation: 2 }, &[&x, &k]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[0], 0.0 + 2.0 + 10.0 + 12.0);
    }

    #[test]
    fn conv2d_reports_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 2, 2]);
        let err = forward(&Primitive::Conv2d { stride: 1, padding: 0, dilation: 1 }, &[&x, &k]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d") && msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn uniform_softmax_is_log_k() {
        for target in 0..8 {
            let x = Tensor::filled(&[1, 8], 0.3);
            let y = forward(&Primitive::SoftmaxCrossEntropy { targets: vec![target] }, &[&x]).unwrap();
            assert!((y.item() - 8f64.ln()).abs() < 1e-12);
            assert!((y.item() - 2.07944).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_distance_of_identical_vectors_is_zero() {
        let v = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let y = forward(&Primitive::CosineDistance, &[&v, &v]).unwrap();
        assert!(y.item().abs() < 1e-15);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let z = Tensor::zeros(&[2]);
        let v = Tensor::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            forward(&Primitive::CosineDistance, &[&z, &v]),
            Err(AutodiffError::ZeroNorm { .. })
        ));
        assert!(forward(&Primitive::L2Normalize, &[&z]).is_err());
    }

    #[test]
    fn reverse_huber_piecewise_and_c1_at_threshold() {
        let c = 0.5;
        assert_eq!(reverse_huber(0.3, c), 0.3);
        assert_eq!(reverse_huber(-0.5, c), 0.5);
        assert!((reverse_huber(1.0, c) - (1.0 + 0.25) / 1.0).abs() < 1e-15);
        for side in [c, -c] {
            let lo = reverse_huber(side * (1.0 - 1e-9), c);
            let hi = reverse_huber(side * (1.0 + 1e-9), c);
            assert!((hi - lo).abs() < 1e-8, "value jump at |x| = c");
            let dl = reverse_huber_grad(side * (1.0 - 1e-9), c);
            let dh = reverse_huber_grad(side * (1.0 + 1e-9), c);
            assert!((dh - dl).abs() < 1e-8, "slope jump at |x| = c");
        }
    }

    #[test]
    fn reverse_huber_default_threshold_tracks_batch() {
        let mut p = Primitive::ReverseHuber { threshold: None };
        let x = Tensor::from_vec(vec![1.0, -5.0, 0.5]);
        p.resolve(&[&x]);
        assert_eq!(p, Primitive::ReverseHuber { threshold: Some(1.0) });
    }

    #[test]
    fn broadcast_bias_over_channels() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let b = t(&[2, 1, 1], &[1.0, -1.0]);
        let y = forward(&Primitive::Add, &[&x, &b]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let bad = Tensor::zeros(&[3]);
        assert!(forward(&Primitive::Add, &[&x, &bad]).is_err());
    }

    #[test]
    fn concat_interleaves_on_inner_axis() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = forward(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!(
            Primitive::from_attrs("tanh", &AttrMap::new()),
            Err(AutodiffError::UnknownKind(_))
        ));
        for k in PrimitiveKind::ALL {
            assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
        }
    }
}
