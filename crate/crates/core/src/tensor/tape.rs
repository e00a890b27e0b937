use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::kernels::{self, ConvDims, PoolDims};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// Per-channel batch statistics observed in a training-mode batch norm:
/// the mean and the unbiased variance.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum NormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        groups: usize,
        out_c: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        layout: NormLayout,
    },
    Resize {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    AvgPool {
        x: Var,
        planes: usize,
        dims: PoolDims,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Sum(Var),
    SumLast {
        x: Var,
        len: usize,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
        c: usize,
        hw: usize,
    },
    ChannelMean {
        x: Var,
        c: usize,
        hw: usize,
    },
    RepeatChannels {
        x: Var,
        c: usize,
        hw: usize,
    },
}

/// Which axis a normalization reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormLayout {
    /// Per channel, over batch and spatial positions.
    Batch { n: usize, c: usize, hw: usize },
    /// Per position, over channels.
    Channel { n: usize, c: usize, hw: usize },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Ordered record of executed operations. Backward replays it in exact
/// reverse order; every node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kinks: Option<DefaultHasher>,
    last_backward_order: Vec<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
            last_backward_order: Vec::new(),
        }
    }

    /// Records the branch taken by every non-smooth operation (ReLU sign,
    /// clamp saturation, channel argmax) into a running signature.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(DefaultHasher::new()),
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices visited by the most recent backward pass.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_backward_order
    }

    /// Indices of the inputs of node `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.op_inputs(&self.nodes[v.0].op)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. `None` for detached values; zeros for
    /// tracked leaves the loss did not reach.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Folds a discrete decision taken outside the tape (for example a
    /// threshold on a tensor value) into the kink signature.
    pub fn note_kink(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in bits {
                h.write_u64(b);
            }
        }
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta.shape(), tb.shape())?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        if self.kinks.is_some() {
            let bits: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| (x > T::zero()) as u64)
                .collect();
            self.note_kink(bits.into_iter());
        }
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            let t = (T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x)).tanh();
            T::of(0.5) * x * (T::one() + t)
        });
        self.push(v, Op::Gelu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| !(x > T::zero())) {
            return Err(Error::contract("log of a nonpositive value"));
        }
        let v = t.map(|x| x.ln());
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        if self.kinks.is_some() {
            let bits: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| (x < lo) as u64 | (((x > hi) as u64) << 1))
                .collect();
            self.note_kink(bits.into_iter());
        }
        self.push(v, Op::Clamp { x: a, lo, hi })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(format!(
                "softmax axis {axis} for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(x[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (x[at(k)] - mx).exp();
                    y[at(k)] = e;
                    s = s + e;
                }
                for k in 0..len {
                    y[at(k)] = y[at(k)] / s;
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(
            v,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Softmax over the last axis of a `[B, Q, L]` tensor where only keys with
    /// `key_mask[b·L + l]` set participate. Rows without any key are all zero.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let (b, q, l) = match *t.shape() {
            [b, q, l] => (b, q, l),
            _ => {
                return Err(Error::shape(format!(
                    "masked_softmax needs rank 3, got {:?}",
                    t.shape()
                )))
            }
        };
        if key_mask.len() != b * l {
            return Err(Error::shape(format!(
                "key mask has {} entries, expected {}",
                key_mask.len(),
                b * l
            )));
        }
        let x = t.data();
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            let mask = &key_mask[bi * l..(bi + 1) * l];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            for qi in 0..q {
                let row = &x[(bi * q + qi) * l..(bi * q + qi + 1) * l];
                let out = &mut y[(bi * q + qi) * l..(bi * q + qi + 1) * l];
                let mut mx = T::neg_infinity();
                for (k, &v) in row.iter().enumerate() {
                    if mask[k] {
                        mx = mx.max(v);
                    }
                }
                let mut s = T::zero();
                for k in 0..l {
                    if mask[k] {
                        let e = (row[k] - mx).exp();
                        out[k] = e;
                        s = s + e;
                    }
                }
                for o in out.iter_mut() {
                    *o = *o / s;
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), y);
        Ok(self.push(
            v,
            Op::Softmax {
                x: a,
                outer: b * q,
                len: l,
                inner: 1,
            },
        ))
    }

    /// Dilated, strided, grouped 2-D cross-correlation of an NCHW input
    /// with an `[O, C/groups, K, K]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        let g = geom.groups;
        if g == 0 || geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::Geometry(format!(
                "invalid convolution geometry {geom:?}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("square kernels only, got {kh}x{kw}")));
        }
        if c % g != 0 || o % g != 0 || ci * g != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but weight expects {} ({} groups)",
                ci * g,
                g
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let k = kh;
        let span = geom.dilation * (k - 1) + 1;
        let (out_h, out_w) = match (
            (h + 2 * geom.padding).checked_sub(span),
            (wd + 2 * geom.padding).checked_sub(span),
        ) {
            (Some(a), Some(b)) => (a / geom.stride + 1, b / geom.stride + 1),
            _ => {
                return Err(Error::Geometry(format!(
                    "conv2d: {h}x{wd} input too small for kernel {k}, dilation {}, padding {}",
                    geom.dilation, geom.padding
                )))
            }
        };
        let dims = ConvDims {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride: geom.stride,
            padding: geom.padding,
            dilation: geom.dilation,
            out_h,
            out_w,
        };
        let og = o / g;
        let p_out = out_h * out_w;
        let kk = ci * k * k;
        let mut out = vec![T::zero(); n * o * p_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for ni in 0..n {
                for gi in 0..g {
                    let xs = &xv[(ni * c + gi * ci) * h * wd..(ni * c + (gi + 1) * ci) * h * wd];
                    let cols = kernels::im2col(xs, &dims);
                    let ws = &wv[gi * og * kk..(gi + 1) * og * kk];
                    let os = &mut out[(ni * o + gi * og) * p_out..(ni * o + (gi + 1) * og) * p_out];
                    kernels::gemm_nn(og, p_out, kk, ws, &cols, os);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for ni in 0..n {
                    for oi in 0..o {
                        for v in &mut out[(ni * o + oi) * p_out..(ni * o + oi + 1) * p_out] {
                            *v = *v + bv[oi];
                        }
                    }
                }
            }
        }
        let v = Tensor::from_parts(vec![n, o, out_h, out_w], out);
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                groups: g,
                out_c: o,
            },
        ))
    }

    fn norm_affine(&self, op: &str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "{op}: gamma {:?} / beta {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Batch normalization over N×H×W per channel. Training mode also returns
    /// the observed batch statistics for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.norm_affine("batch_norm", gamma, beta, c)?;
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateStatistics(
                        "training-mode batch norm over a single value per channel".into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        for &v in &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                            s = s + v;
                        }
                    }
                    let m = s / T::of(count as f64);
                    let mut q = T::zero();
                    for ni in 0..n {
                        for &v in &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = q / T::of(count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::of(count as f64 / (count - 1) as f64))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm: running statistics length mismatch",
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for i in r {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = g[ci] * xh + b[ci];
                }
            }
        }
        let v = Tensor::from_parts(vec![n, c, h, w], y);
        let batch_stats = stats.is_some();
        let out = self.push(
            v,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                layout: NormLayout::Batch { n, c, hw },
            },
        );
        Ok((out, stats))
    }

    /// Layer normalization over the channel axis at every spatial position.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.norm_affine("layer_norm", gamma, beta, c)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * hw];
        let cf = T::of(c as f64);
        for ni in 0..n {
            for p in 0..hw {
                let at = |ci: usize| (ni * c + ci) * hw + p;
                let mean = (0..c).map(|ci| xv[at(ci)]).sum::<T>() / cf;
                let var = (0..c)
                    .map(|ci| (xv[at(ci)] - mean) * (xv[at(ci)] - mean))
                    .sum::<T>()
                    / cf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[ni * hw + p] = inv;
                for ci in 0..c {
                    let xh = (xv[at(ci)] - mean) * inv;
                    xhat[at(ci)] = xh;
                    y[at(ci)] = g[ci] * xh + b[ci];
                }
            }
        }
        let v = Tensor::from_parts(vec![n, c, h, w], y);
        Ok(self.push(
            v,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
                layout: NormLayout::Channel { n, c, hw },
            },
        ))
    }

    /// Bilinear resize with half-pixel centers and border clamping.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let v = self.value(x).resize_bilinear(out_h, out_w)?;
        Ok(self.push(
            v,
            Op::Resize {
                x,
                planes: n * c,
                h,
                w,
                oh: out_h,
                ow: out_w,
            },
        ))
    }

    /// Average pooling; `count_pad` divides by the full window area.
    pub fn avg_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
        count_pad: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let dims = avg_pool_dims(h, w, kernel, stride, padding, count_pad)?;
        let mut out = vec![T::zero(); n * c * dims.out_h * dims.out_w];
        kernels::avg_pool_forward(self.value(x).data(), &mut out, n * c, &dims);
        let v = Tensor::from_parts(vec![n, c, dims.out_h, dims.out_w], out);
        Ok(self.push(
            v,
            Op::AvgPool {
                x,
                planes: n * c,
                dims,
            },
        ))
    }

    /// Batched matrix product `[.., M, K] · [.., K, N]` with equal leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::gemm_nn(
                m,
                n,
                k,
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = numel(&s[..r - 2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..batch {
            out.extend(kernels::transpose(
                &xv[bi * rows * cols..(bi + 1) * rows * cols],
                rows,
                cols,
            ));
        }
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
        ))
    }

    /// Concatenation along `axis`, preserving input order.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                sizes,
                inner,
            },
        ))
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow {start}+{len} on axis {axis} of {s:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("sum_last needs rank >= 2, got {s:?}")));
        }
        let len = *s.last().unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(len)
            .map(|c| c.iter().copied().sum())
            .collect();
        Ok(self.push(
            Tensor::from_parts(s[..s.len() - 1].to_vec(), out),
            Op::SumLast { x, len },
        ))
    }

    /// Maximum over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut best = 0;
                for ci in 1..c {
                    if d[(ni * c + ci) * hw + p] > d[(ni * c + best) * hw + p] {
                        best = ci;
                    }
                }
                argmax[ni * hw + p] = best;
                out[ni * hw + p] = d[(ni * c + best) * hw + p];
            }
        }
        if self.kinks.is_some() {
            let bits: Vec<u64> = argmax.iter().map(|&a| a as u64).collect();
            self.note_kink(bits.into_iter());
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelMax { x, argmax, c, hw },
        ))
    }

    /// Mean over channels, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                add_into(
                    &mut out[ni * hw..(ni + 1) * hw],
                    &d[(ni * c + ci) * hw..(ni * c + ci + 1) * hw],
                );
            }
        }
        let cf = T::of(c as f64);
        for v in &mut out {
            *v = *v / cf;
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelMean { x, c, hw },
        ))
    }

    /// Repeats a single-channel map `c` times, `[N, 1, H, W] -> [N, C, H, W]`.
    pub fn repeat_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let (n, one, h, w) = self.value(x).dims4()?;
        if one != 1 || c == 0 {
            return Err(Error::shape(format!(
                "repeat_channels needs a 1-channel map, got {one} channels"
            )));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * hw);
        for ni in 0..n {
            for _ in 0..c {
                out.extend_from_slice(&d[ni * hw..(ni + 1) * hw]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::RepeatChannels { x, c, hw },
        ))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Log(a) => {
                vec![*a]
            }
            Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Resize { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Transpose { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::SumLast { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::ChannelMean { x, .. }
            | Op::RepeatChannels { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    /// Reverse-mode pass from a one-element `loss`. Gradients accumulate onto
    /// the leaves across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.last_backward_order.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.last_backward_order.push(idx);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let contributions = self.node_backward(idx, &g);
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => add_into(acc, &dv),
                    None => grads[v.0] = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect()));
                }
                if self.wants(*b) {
                    out.push((
                        *b,
                        g.iter()
                            .zip(av)
                            .zip(bv)
                            .map(|((&g, &a), &b)| -g * a / (b * b))
                            .collect(),
                    ));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::Relu(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )),
            Op::Gelu(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| {
                        let c = T::of(GELU_C);
                        let ga = T::of(GELU_A);
                        let t = (c * (x + ga * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + T::of(3.0) * ga * x * x);
                        g * (T::of(0.5) * (T::one() + t) + T::of(0.5) * x * dt)
                    })
                    .collect(),
            )),
            Op::Log(a) => out.push((*a, g.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect())),
            Op::Clamp { x, lo, hi } => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect(),
            )),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..*len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Conv2d {
                x,
                w,
                b,
                dims,
                groups,
                out_c,
            } => {
                let (n, c) = (
                    self.nodes[x.0].value.shape()[0],
                    self.nodes[x.0].value.shape()[1],
                );
                let (gcount, o) = (*groups, *out_c);
                let (ci, og) = (c / gcount, o / gcount);
                let k = dims.kernel;
                let kk = ci * k * k;
                let p_out = dims.out_h * dims.out_w;
                let hw = dims.height * dims.width;
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                for ni in 0..n {
                    for gi in 0..gcount {
                        let gs = &g[(ni * o + gi * og) * p_out..(ni * o + (gi + 1) * og) * p_out];
                        if let Some(dw) = dw.as_mut() {
                            let xs = &xv[(ni * c + gi * ci) * hw..(ni * c + (gi + 1) * ci) * hw];
                            let cols = kernels::im2col(xs, dims);
                            kernels::gemm_nt(
                                og,
                                kk,
                                p_out,
                                gs,
                                &cols,
                                &mut dw[gi * og * kk..(gi + 1) * og * kk],
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            let ws = &wv[gi * og * kk..(gi + 1) * og * kk];
                            let mut dcols = vec![T::zero(); kk * p_out];
                            kernels::gemm_tn(kk, p_out, og, ws, gs, &mut dcols);
                            kernels::col2im_add(
                                &dcols,
                                dims,
                                &mut dx[(ni * c + gi * ci) * hw..(ni * c + (gi + 1) * ci) * hw],
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for ni in 0..n {
                            for (oi, d) in db.iter_mut().enumerate() {
                                *d = *d
                                    + g[(ni * o + oi) * p_out..(ni * o + oi + 1) * p_out]
                                        .iter()
                                        .copied()
                                        .sum();
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                layout,
            } => {
                let gv = val(*gamma);
                let (n, c, hw) = match *layout {
                    NormLayout::Batch { n, c, hw } | NormLayout::Channel { n, c, hw } => (n, c, hw),
                };
                let at = |ni: usize, ci: usize, p: usize| (ni * c + ci) * hw + p;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..hw {
                            let i = at(ni, ci, p);
                            dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                            dbeta[ci] = dbeta[ci] + g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    match *layout {
                        NormLayout::Batch { .. } if !*batch_stats => {
                            for ni in 0..n {
                                for ci in 0..c {
                                    for p in 0..hw {
                                        let i = at(ni, ci, p);
                                        dx[i] = g[i] * gv[ci] * inv_std[ci];
                                    }
                                }
                            }
                        }
                        NormLayout::Batch { .. } => {
                            let m = T::of((n * hw) as f64);
                            for ci in 0..c {
                                let (mut s1, mut s2) = (T::zero(), T::zero());
                                for ni in 0..n {
                                    for p in 0..hw {
                                        let i = at(ni, ci, p);
                                        let dxh = g[i] * gv[ci];
                                        s1 = s1 + dxh;
                                        s2 = s2 + dxh * xhat[i];
                                    }
                                }
                                for ni in 0..n {
                                    for p in 0..hw {
                                        let i = at(ni, ci, p);
                                        let dxh = g[i] * gv[ci];
                                        dx[i] = inv_std[ci] / m * (m * dxh - s1 - xhat[i] * s2);
                                    }
                                }
                            }
                        }
                        NormLayout::Channel { .. } => {
                            let m = T::of(c as f64);
                            for ni in 0..n {
                                for p in 0..hw {
                                    let (mut s1, mut s2) = (T::zero(), T::zero());
                                    for ci in 0..c {
                                        let i = at(ni, ci, p);
                                        let dxh = g[i] * gv[ci];
                                        s1 = s1 + dxh;
                                        s2 = s2 + dxh * xhat[i];
                                    }
                                    let inv = inv_std[ni * hw + p];
                                    for ci in 0..c {
                                        let i = at(ni, ci, p);
                                        let dxh = g[i] * gv[ci];
                                        dx[i] = inv / m * (m * dxh - s1 - xhat[i] * s2);
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Resize {
                x,
                planes,
                h,
                w,
                oh,
                ow,
            } => {
                let mut dx = vec![T::zero(); planes * h * w];
                kernels::resize_backward(g, &mut dx, *planes, *h, *w, *oh, *ow);
                out.push((*x, dx));
            }
            Op::AvgPool { x, planes, dims } => {
                let mut dx = vec![T::zero(); planes * dims.height * dims.width];
                kernels::avg_pool_backward(g, &mut dx, *planes, dims);
                out.push((*x, dx));
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..*batch {
                        kernels::gemm_nt(
                            m,
                            k,
                            n,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..*batch {
                        kernels::gemm_tn(
                            k,
                            n,
                            m,
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let mut dx = Vec::with_capacity(g.len());
                for bi in 0..*batch {
                    dx.extend(kernels::transpose(
                        &g[bi * rows * cols..(bi + 1) * rows * cols],
                        *cols,
                        *rows,
                    ));
                }
                out.push((*x, dx));
            }
            Op::Concat {
                xs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in xs.iter().zip(sizes) {
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        out.push((v, dx));
                    }
                    offset += sz;
                }
            }
            Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
                inner,
            } => {
                let mut dx = vec![T::zero(); outer * full * inner];
                for o in 0..*outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.len()])),
            Op::SumLast { x, len } => out.push((
                *x,
                g.iter()
                    .flat_map(|&v| std::iter::repeat_n(v, *len))
                    .collect(),
            )),
            Op::ChannelMax { x, argmax, c, hw } => {
                let n = argmax.len() / hw;
                let mut dx = vec![T::zero(); n * c * hw];
                for ni in 0..n {
                    for p in 0..*hw {
                        dx[(ni * c + argmax[ni * hw + p]) * hw + p] = g[ni * hw + p];
                    }
                }
                out.push((*x, dx));
            }
            Op::ChannelMean { x, c, hw } => {
                let n = g.len() / hw;
                let cf = T::of(*c as f64);
                let mut dx = Vec::with_capacity(n * c * hw);
                for ni in 0..n {
                    for _ in 0..*c {
                        dx.extend(g[ni * hw..(ni + 1) * hw].iter().map(|&v| v / cf));
                    }
                }
                out.push((*x, dx));
            }
            Op::RepeatChannels { x, c, hw } => {
                let n = g.len() / (c * hw);
                let mut dx = vec![T::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..*c {
                        add_into(
                            &mut dx[ni * hw..(ni + 1) * hw],
                            &g[(ni * c + ci) * hw..(ni * c + ci + 1) * hw],
                        );
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn avg_pool_dims(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    count_pad: bool,
) -> Result<PoolDims> {
    if kernel == 0 || stride == 0 || padding >= kernel {
        return Err(Error::Geometry(format!(
            "avg_pool kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    PoolDims::new(h, w, kernel, stride, padding, count_pad).ok_or_else(|| {
        Error::Geometry(format!(
            "avg_pool window {kernel} larger than {h}x{w} input"
        ))
    })
}
