//! Eager tape recording forward operations for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and pushes one node; node
//! ids are therefore already in topological order and `backward` walks them
//! in reverse. A graph belongs to one forward/backward pass: running
//! `backward` twice without a new forward is an error.

use std::sync::Arc;

use num_complex::Complex;

use super::fft;
use super::{CTensor, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Value<T> {
    R(Tensor<T>),
    C(CTensor<T>),
}

impl<T: Real> Value<T> {
    pub fn dims(&self) -> &[usize] {
        match self {
            Value::R(t) => t.dims(),
            Value::C(t) => t.dims(),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Value::R(t) => t.all_finite(),
            Value::C(t) => t.all_finite(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::R(_) => "real",
            Value::C(_) => "complex",
        }
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Matmul(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    MeanChannels(NodeId),
    SubChanVec(NodeId, NodeId),
    MulChanVec(NodeId, NodeId),
    RsqrtEps(NodeId, T),
    MulChannelScalars(NodeId, NodeId),
    MulSpatialMap(NodeId, NodeId),
    ConvexCombo { a: NodeId, b: NodeId, w: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, dilation: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    SliceChannel { x: NodeId, c: usize },
    Subsample { x: NodeId, factor: usize },
    BilinearUpsample(NodeId),
    Fft2(NodeId),
    Ifft2(NodeId),
    SpectralMulConst { x: NodeId, filt: Arc<Tensor<T>> },
    Modulus(NodeId),
    RealPart(NodeId),
    BceWithLogits { logits: NodeId, labels: Tensor<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Value<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Value<T>, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Leaf, Value::R(t), requires_grad, "leaf")
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Value<T> {
        &self.nodes[id.0].value
    }

    pub fn real(&self, id: NodeId) -> Result<&Tensor<T>> {
        match &self.nodes[id.0].value {
            Value::R(t) => Ok(t),
            Value::C(_) => Err(Error::KindMismatch { expected: "real", got: "complex" }),
        }
    }

    pub fn complex(&self, id: NodeId) -> Result<&CTensor<T>> {
        match &self.nodes[id.0].value {
            Value::C(t) => Ok(t),
            Value::R(_) => Err(Error::KindMismatch { expected: "complex", got: "real" }),
        }
    }

    /// Gradient of a leaf after `backward`; zeros when the leaf was never
    /// reached by the sweep.
    pub fn grad(&self, id: NodeId) -> Result<Tensor<T>> {
        match &self.grads[id.0] {
            Some(Value::R(t)) => Ok(t.clone()),
            Some(Value::C(_)) => Err(Error::KindMismatch { expected: "real", got: "complex" }),
            None => Ok(Tensor::zeros(self.nodes[id.0].value.dims())),
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&self, a: NodeId, b: NodeId) -> Result<(Tensor<T>, Tensor<T>)> {
        let ta = self.real(a)?;
        let tb = self.real(b)?;
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch { expected: ta.dims().to_vec(), got: tb.dims().to_vec() });
        }
        Ok((ta.clone(), tb.clone()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape(a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(ta.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), Value::R(out), ng, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape(a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(ta.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), Value::R(out), ng, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape(a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(ta.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), Value::R(out), ng, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let ta = self.real(a)?;
        let out = Tensor::from_vec(ta.dims(), ta.data().iter().map(|&x| x * c).collect())?;
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), Value::R(out), ng, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.real(a)?;
        let out = Tensor::from_vec(
            ta.dims(),
            ta.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        )?;
        let ng = self.needs(a);
        self.push(Op::Relu(a), Value::R(out), ng, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.real(a)?;
        let one = T::one();
        let out = Tensor::from_vec(
            ta.dims(),
            ta.data().iter().map(|&x| one / (one + (-x).exp())).collect(),
        )?;
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), Value::R(out), ng, "sigmoid")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.real(a)?;
        let s: T = ta.data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Value::R(Tensor::scalar(s)), ng, "sum")
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.real(a)?;
        let tb = self.real(b)?;
        let (m, k) = match ta.dims() {
            [m, k] => (*m, *k),
            _ => return Err(Error::Dims(format!("matmul lhs must be rank 2, got {:?}", ta.dims()))),
        };
        let (k2, n) = match tb.dims() {
            [k2, n] => (*k2, *n),
            _ => return Err(Error::Dims(format!("matmul rhs must be rank 2, got {:?}", tb.dims()))),
        };
        if k != k2 {
            return Err(Error::ShapeMismatch { expected: vec![m, k], got: vec![k2, n] });
        }
        let mut out = vec![T::zero(); m * n];
        let ad = ta.data();
        let bd = tb.data();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let row = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * row[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), Value::R(Tensor::from_vec(&[m, n], out)?), ng, "matmul")
    }

    /// Adds a length-n bias vector to every row of an (m, n) matrix.
    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let ta = self.real(a)?;
        let tb = self.real(bias)?;
        let (m, n) = match ta.dims() {
            [m, n] => (*m, *n),
            _ => return Err(Error::Dims(format!("add_bias_row lhs must be rank 2, got {:?}", ta.dims()))),
        };
        if tb.dims() != [n] {
            return Err(Error::ShapeMismatch { expected: vec![n], got: tb.dims().to_vec() });
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + tb.data()[j];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(Op::AddBiasRow(a, bias), Value::R(Tensor::from_vec(&[m, n], out)?), ng, "add_bias_row")
    }

    // ── reductions & broadcasts over (B, K, H, W) ─────────────────────

    fn dims4(&self, id: NodeId, name: &str) -> Result<(usize, usize, usize, usize)> {
        let t = self.real(id)?;
        match t.dims() {
            [b, k, h, w] => Ok((*b, *k, *h, *w)),
            _ => Err(Error::Dims(format!("{name} expects rank 4, got {:?}", t.dims()))),
        }
    }

    /// Spatial mean per (batch, channel): (B, C, H, W) -> (B, C).
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, k, h, w) = self.dims4(x, "global_avg_pool")?;
        let tx = self.real(x)?;
        let hw = T::of_usize(h * w);
        let mut out = vec![T::zero(); b * k];
        for bi in 0..b {
            for ki in 0..k {
                let base = (bi * k + ki) * h * w;
                let s: T = tx.data()[base..base + h * w].iter().copied().sum();
                out[bi * k + ki] = s / hw;
            }
        }
        let ng = self.needs(x);
        self.push(Op::GlobalAvgPool(x), Value::R(Tensor::from_vec(&[b, k], out)?), ng, "global_avg_pool")
    }

    /// Mean over batch and spatial axes per channel: (B, K, H, W) -> (K).
    pub fn mean_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, k, h, w) = self.dims4(x, "mean_channels")?;
        let tx = self.real(x)?;
        let cnt = T::of_usize(b * h * w);
        let mut out = vec![T::zero(); k];
        for bi in 0..b {
            for ki in 0..k {
                let base = (bi * k + ki) * h * w;
                let s: T = tx.data()[base..base + h * w].iter().copied().sum();
                out[ki] = out[ki] + s;
            }
        }
        for v in &mut out {
            *v = *v / cnt;
        }
        let ng = self.needs(x);
        self.push(Op::MeanChannels(x), Value::R(Tensor::from_vec(&[k], out)?), ng, "mean_channels")
    }

    fn chan_vec_op(&mut self, x: NodeId, v: NodeId, sub: bool) -> Result<NodeId> {
        let (b, k, h, w) = self.dims4(x, "chan_vec")?;
        let tv = self.real(v)?;
        if tv.dims() != [k] {
            return Err(Error::ShapeMismatch { expected: vec![k], got: tv.dims().to_vec() });
        }
        let tx = self.real(x)?;
        let vd = tv.data().to_vec();
        let mut out = tx.data().to_vec();
        for bi in 0..b {
            for ki in 0..k {
                let base = (bi * k + ki) * h * w;
                let c = vd[ki];
                for o in &mut out[base..base + h * w] {
                    *o = if sub { *o - c } else { *o * c };
                }
            }
        }
        let ng = self.needs(x) || self.needs(v);
        let op = if sub { Op::SubChanVec(x, v) } else { Op::MulChanVec(x, v) };
        let name = if sub { "sub_chan_vec" } else { "mul_chan_vec" };
        self.push(op, Value::R(Tensor::from_vec(&[b, k, h, w], out)?), ng, name)
    }

    /// (B, K, H, W) minus a per-channel vector (K).
    pub fn sub_chan_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.chan_vec_op(x, v, true)
    }

    /// (B, K, H, W) times a per-channel vector (K).
    pub fn mul_chan_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.chan_vec_op(x, v, false)
    }

    /// Elementwise 1/sqrt(x + eps).
    pub fn rsqrt_eps(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let tx = self.real(x)?;
        let out = Tensor::from_vec(
            tx.dims(),
            tx.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        )?;
        let ng = self.needs(x);
        self.push(Op::RsqrtEps(x, eps), Value::R(out), ng, "rsqrt_eps")
    }

    /// (B, K, H, W) scaled per (batch, channel) by an (B, K) matrix.
    pub fn mul_channel_scalars(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (b, k, h, w) = self.dims4(x, "mul_channel_scalars")?;
        let ts = self.real(s)?;
        if ts.dims() != [b, k] {
            return Err(Error::ShapeMismatch { expected: vec![b, k], got: ts.dims().to_vec() });
        }
        let tx = self.real(x)?;
        let sd = ts.data().to_vec();
        let mut out = tx.data().to_vec();
        for bi in 0..b {
            for ki in 0..k {
                let base = (bi * k + ki) * h * w;
                let c = sd[bi * k + ki];
                for o in &mut out[base..base + h * w] {
                    *o = *o * c;
                }
            }
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(Op::MulChannelScalars(x, s), Value::R(Tensor::from_vec(&[b, k, h, w], out)?), ng, "mul_channel_scalars")
    }

    /// (B, K, H, W) multiplied by a (B, 1, H, W) map broadcast over K.
    pub fn mul_spatial_map(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (b, k, h, w) = self.dims4(x, "mul_spatial_map")?;
        let tm = self.real(m)?;
        if tm.dims() != [b, 1, h, w] {
            return Err(Error::ShapeMismatch { expected: vec![b, 1, h, w], got: tm.dims().to_vec() });
        }
        let tx = self.real(x)?;
        let md = tm.data().to_vec();
        let mut out = tx.data().to_vec();
        for bi in 0..b {
            for ki in 0..k {
                let base = (bi * k + ki) * h * w;
                let mbase = bi * h * w;
                for idx in 0..h * w {
                    out[base + idx] = out[base + idx] * md[mbase + idx];
                }
            }
        }
        let ng = self.needs(x) || self.needs(m);
        self.push(Op::MulSpatialMap(x, m), Value::R(Tensor::from_vec(&[b, k, h, w], out)?), ng, "mul_spatial_map")
    }

    /// w*a + (1-w)*b with a scalar weight node.
    pub fn convex_combo(&mut self, a: NodeId, b: NodeId, w: NodeId) -> Result<NodeId> {
        let (ta, tb) = self.binary_same_shape(a, b)?;
        let wv = self.real(w)?.item()?;
        let one = T::one();
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| wv * x + (one - wv) * y)
            .collect();
        let out = Tensor::from_vec(ta.dims(), data)?;
        let ng = self.needs(a) || self.needs(b) || self.needs(w);
        self.push(Op::ConvexCombo { a, b, w }, Value::R(out), ng, "convex_combo")
    }

    // ── convolution & pooling ───────────────────────────────────────

    /// Cross-correlation with zero 'same' padding and odd square kernels.
    /// Kernel layout (Cout, Cin, kh, kw); optional bias (Cout).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, dilation: usize) -> Result<NodeId> {
        if !(1..=3).contains(&dilation) {
            return Err(Error::InvalidArgument(format!("dilation must be 1..=3, got {dilation}")));
        }
        let (bb, cin, h, wd) = self.dims4(x, "conv2d")?;
        let tw = self.real(w)?;
        let (cout, cin2, kh, kw) = match tw.dims() {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => return Err(Error::Dims(format!("conv2d kernel must be rank 4, got {:?}", tw.dims()))),
        };
        if cin != cin2 || kh != kw || kh % 2 == 0 {
            return Err(Error::Dims(format!(
                "conv2d kernel ({cout},{cin2},{kh},{kw}) incompatible with input channels {cin}"
            )));
        }
        let pad = dilation * (kh - 1) / 2;
        if dilation * (kh - 1) + 1 > h + 2 * pad || dilation * (kw - 1) + 1 > wd + 2 * pad {
            return Err(Error::Dims("conv2d kernel larger than padded input".into()));
        }
        if let Some(bid) = b {
            let tb = self.real(bid)?;
            if tb.dims() != [cout] {
                return Err(Error::ShapeMismatch { expected: vec![cout], got: tb.dims().to_vec() });
            }
        }
        let tx = self.real(x)?.clone();
        let twv = tw.clone();
        let bias: Option<Vec<T>> = match b {
            Some(bid) => Some(self.real(bid)?.data().to_vec()),
            None => None,
        };
        let mut out = vec![T::zero(); bb * cout * h * wd];
        let xd = tx.data();
        let kd = twv.data();
        let taps = conv_taps(kh, dilation, pad, h, wd);
        for bi in 0..bb {
            for oc in 0..cout {
                let obase = (bi * cout + oc) * h * wd;
                if let Some(bv) = &bias {
                    let bvv = bv[oc];
                    for o in &mut out[obase..obase + h * wd] {
                        *o = bvv;
                    }
                }
                for ic in 0..cin {
                    let ibase = (bi * cin + ic) * h * wd;
                    let kbase = (oc * cin + ic) * kh * kw;
                    for t in &taps {
                        let kv = kd[kbase + t.k_idx];
                        if kv == T::zero() {
                            continue;
                        }
                        for i in t.i_lo..t.i_hi {
                            let xrow = ibase + (i + t.oi - pad) * wd;
                            let orow = obase + i * wd;
                            let src = &xd[xrow + t.j_lo + t.oj - pad..xrow + t.j_hi + t.oj - pad];
                            let dst = &mut out[orow + t.j_lo..orow + t.j_hi];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o = *o + x * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        self.push(
            Op::Conv2d { x, w, b, dilation },
            Value::R(Tensor::from_vec(&[bb, cout, h, wd], out)?),
            ng,
            "conv2d",
        )
    }

    fn conv2d_backward(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
        gr: &Tensor<T>,
    ) -> Result<()> {
        let tx = self.real(x)?.clone();
        let tw = self.real(w)?.clone();
        let (bb, cout, h, wd) = (gr.dims()[0], gr.dims()[1], gr.dims()[2], gr.dims()[3]);
        let cin = tw.dims()[1];
        let (kh, kw) = (tw.dims()[2], tw.dims()[3]);
        let pad = dilation * (kh - 1) / 2;
        let taps = conv_taps(kh, dilation, pad, h, wd);
        let _ = kw;
        if self.needs(x) {
            let mut dx = vec![T::zero(); bb * cin * h * wd];
            for bi in 0..bb {
                for oc in 0..cout {
                    let gbase = (bi * cout + oc) * h * wd;
                    for ic in 0..cin {
                        let xbase = (bi * cin + ic) * h * wd;
                        let kbase = (oc * cin + ic) * kh * kw;
                        for t in &taps {
                            let kv = tw.data()[kbase + t.k_idx];
                            if kv == T::zero() {
                                continue;
                            }
                            for i in t.i_lo..t.i_hi {
                                let xrow = xbase + (i + t.oi - pad) * wd;
                                let grow = gbase + i * wd;
                                let gsrc = &gr.data()[grow + t.j_lo..grow + t.j_hi];
                                let dst = &mut dx[xrow + t.j_lo + t.oj - pad..xrow + t.j_hi + t.oj - pad];
                                for (d, &g) in dst.iter_mut().zip(gsrc) {
                                    *d = *d + g * kv;
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(x, Value::R(Tensor::from_vec(&[bb, cin, h, wd], dx)?));
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); cout * cin * kh * kw];
            for bi in 0..bb {
                for oc in 0..cout {
                    let gbase = (bi * cout + oc) * h * wd;
                    for ic in 0..cin {
                        let xbase = (bi * cin + ic) * h * wd;
                        let kbase = (oc * cin + ic) * kh * kw;
                        for t in &taps {
                            let mut acc = T::zero();
                            for i in t.i_lo..t.i_hi {
                                let xrow = xbase + (i + t.oi - pad) * wd;
                                let grow = gbase + i * wd;
                                let gsrc = &gr.data()[grow + t.j_lo..grow + t.j_hi];
                                let xsrc = &tx.data()[xrow + t.j_lo + t.oj - pad..xrow + t.j_hi + t.oj - pad];
                                for (&g, &xv) in gsrc.iter().zip(xsrc) {
                                    acc = acc + g * xv;
                                }
                            }
                            dw[kbase + t.k_idx] = dw[kbase + t.k_idx] + acc;
                        }
                    }
                }
            }
            self.accumulate(w, Value::R(Tensor::from_vec(&[cout, cin, kh, kw], dw)?));
        }
        if let Some(bid) = b {
            if self.needs(bid) {
                let mut db = vec![T::zero(); cout];
                for bi in 0..bb {
                    for oc in 0..cout {
                        let gbase = (bi * cout + oc) * h * wd;
                        for &gv in &gr.data()[gbase..gbase + h * wd] {
                            db[oc] = db[oc] + gv;
                        }
                    }
                }
                self.accumulate(bid, Value::R(Tensor::from_vec(&[cout], db)?));
            }
        }
        Ok(())
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.dims4(x, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dims(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
        }
        let tx = self.real(x)?;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        let xd = tx.data();
        for bc in 0..b * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = xd[ibase + 2 * i * w + 2 * j];
                    let mut bidx = ibase + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ibase + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > best {
                            best = xd[idx];
                            bidx = idx;
                        }
                    }
                    out[obase + i * ow + j] = best;
                    argmax[obase + i * ow + j] = bidx;
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Op::MaxPool2 { x, argmax },
            Value::R(Tensor::from_vec(&[b, c, oh, ow], out)?),
            ng,
            "max_pool2",
        )
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let tx = self.real(x)?;
        let out = tx.reshaped(dims)?;
        let ng = self.needs(x);
        self.push(Op::Reshape(x), Value::R(out), ng, "reshape")
    }

    /// Concatenates same-rank real tensors along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat needs at least one input".into()));
        }
        let first = self.real(parts[0])?.dims().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range for rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let d = self.real(p)?.dims();
            if d.len() != first.len()
                || d.iter().enumerate().any(|(i, &v)| i != axis && v != first[i])
            {
                return Err(Error::ShapeMismatch { expected: first.clone(), got: d.to_vec() });
            }
            axis_total += d[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut odims = first.clone();
        odims[axis] = axis_total;
        let mut out = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let t = self.real(p)?;
            let pa = t.dims()[axis];
            for o in 0..outer {
                let src = &t.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = (o * axis_total + offset) * inner;
                out[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::Concat { axis, parts: parts.to_vec() },
            Value::R(Tensor::from_vec(&odims, out)?),
            ng,
            "concat",
        )
    }

    /// Extracts channel c of a (B, C, H, W) tensor as (B, H, W).
    pub fn slice_channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let (b, cc, h, w) = self.dims4(x, "slice_channel")?;
        if c >= cc {
            return Err(Error::InvalidArgument(format!("channel {c} out of range 0..{cc}")));
        }
        let tx = self.real(x)?;
        let mut out = vec![T::zero(); b * h * w];
        for bi in 0..b {
            let src = (bi * cc + c) * h * w;
            out[bi * h * w..(bi + 1) * h * w].copy_from_slice(&tx.data()[src..src + h * w]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceChannel { x, c }, Value::R(Tensor::from_vec(&[b, h, w], out)?), ng, "slice_channel")
    }

    /// Keeps every `factor`-th pixel of the last two axes.
    pub fn subsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let tx = self.real(x)?;
        let (h, w) = tx.spatial()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Dims(format!("subsample factor {factor} incompatible with {h}x{w}")));
        }
        let lead: usize = tx.dims()[..tx.dims().len() - 2].iter().product();
        let (oh, ow) = (h / factor, w / factor);
        let mut out = vec![T::zero(); lead * oh * ow];
        for p in 0..lead {
            let ibase = p * h * w;
            let obase = p * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    out[obase + i * ow + j] = tx.data()[ibase + i * factor * w + j * factor];
                }
            }
        }
        let mut odims = tx.dims().to_vec();
        let r = odims.len();
        odims[r - 2] = oh;
        odims[r - 1] = ow;
        let ng = self.needs(x);
        self.push(Op::Subsample { x, factor }, Value::R(Tensor::from_vec(&odims, out)?), ng, "subsample")
    }

    /// Corner-aligned bilinear interpolation of the last two axes.
    pub fn bilinear_upsample(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let tx = self.real(x)?;
        let out = bilinear_resize_last2(tx, oh, ow)?;
        let ng = self.needs(x);
        self.push(Op::BilinearUpsample(x), Value::R(out), ng, "bilinear_upsample")
    }

    // ── Fourier pipeline ────────────────────────────────────────────

    pub fn fft2(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.real(x)?;
        let spec = fft::fft2(tx)?;
        let ng = self.needs(x);
        self.push(Op::Fft2(x), Value::C(spec), ng, "fft2")
    }

    pub fn ifft2(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.complex(x)?;
        let out = fft::ifft2_c(tx)?;
        let ng = self.needs(x);
        self.push(Op::Ifft2(x), Value::C(out), ng, "ifft2")
    }

    /// Multiplies every (H, W) plane of a complex tensor by a fixed real
    /// filter spectrum.
    pub fn spectral_mul_const(&mut self, x: NodeId, filt: Arc<Tensor<T>>) -> Result<NodeId> {
        let tx = self.complex(x)?;
        let (h, w) = tx.spatial()?;
        if filt.dims() != [h, w] {
            return Err(Error::ShapeMismatch { expected: vec![h, w], got: filt.dims().to_vec() });
        }
        let plane = h * w;
        let mut out = tx.clone();
        for p in out.data_mut().chunks_mut(plane) {
            for (z, &f) in p.iter_mut().zip(filt.data()) {
                *z = Complex::new(z.re * f, z.im * f);
            }
        }
        let ng = self.needs(x);
        self.push(Op::SpectralMulConst { x, filt }, Value::C(out), ng, "spectral_mul_const")
    }

    /// Elementwise complex magnitude; the gradient at the origin is zero.
    pub fn modulus(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.complex(x)?;
        let out = tx.modulus();
        let ng = self.needs(x);
        self.push(Op::Modulus(x), Value::R(out), ng, "modulus")
    }

    pub fn real_part(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.complex(x)?;
        let out = tx.real_part();
        let ng = self.needs(x);
        self.push(Op::RealPart(x), Value::R(out), ng, "real_part")
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Numerically stable mean binary cross-entropy from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &Tensor<T>) -> Result<NodeId> {
        let tl = self.real(logits)?;
        if tl.dims() != labels.dims() {
            return Err(Error::ShapeMismatch { expected: tl.dims().to_vec(), got: labels.dims().to_vec() });
        }
        let n = T::of_usize(tl.numel());
        let mut acc = T::zero();
        for (&z, &y) in tl.data().iter().zip(labels.data()) {
            let m = if z > T::zero() { z } else { T::zero() };
            acc = acc + m - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let ng = self.needs(logits);
        self.push(
            Op::BceWithLogits { logits, labels: labels.clone() },
            Value::R(Tensor::scalar(acc / n)),
            ng,
            "bce_with_logits",
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_against(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let tgt = self.constant(target.clone())?;
        let d = self.sub(pred, tgt)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq)?;
        self.scale(s, T::one() / T::of_usize(target.numel()))
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, g: Value<T>) {
        match &mut self.grads[id.0] {
            Some(Value::R(acc)) => {
                if let Value::R(gt) = g {
                    for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                        *a = *a + *b;
                    }
                }
            }
            Some(Value::C(acc)) => {
                if let Value::C(gt) = g {
                    for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                        *a = *a + *b;
                    }
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar output. Gradients of `requires_grad`
    /// leaves become available through [`Graph::grad`].
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        let numel = self.nodes[out.0].value.dims().iter().product::<usize>();
        if numel != 1 {
            return Err(Error::NotScalar(numel));
        }
        self.grads[out.0] = Some(Value::R(Tensor::scalar(T::one())));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match self.grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: Value<T>) -> Result<()> {
        let one = T::one();
        // Ops that produced this node; inputs are strictly earlier nodes.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let gr = as_real(&g)?;
                if self.needs(a) {
                    self.accumulate(a, Value::R(gr.clone()));
                }
                if self.needs(b) {
                    self.accumulate(b, Value::R(gr.clone()));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let gr = as_real(&g)?;
                if self.needs(a) {
                    self.accumulate(a, Value::R(gr.clone()));
                }
                if self.needs(b) {
                    let neg = Tensor::from_vec(gr.dims(), gr.data().iter().map(|&v| -v).collect())?;
                    self.accumulate(b, Value::R(neg));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let gr = as_real(&g)?.clone();
                let ta = self.real(a)?.clone();
                let tb = self.real(b)?.clone();
                if self.needs(a) {
                    let da = Tensor::from_vec(
                        gr.dims(),
                        gr.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    )?;
                    self.accumulate(a, Value::R(da));
                }
                if self.needs(b) {
                    let db = Tensor::from_vec(
                        gr.dims(),
                        gr.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
                    )?;
                    self.accumulate(b, Value::R(db));
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let gr = as_real(&g)?;
                if self.needs(a) {
                    let da = Tensor::from_vec(gr.dims(), gr.data().iter().map(|&v| v * c).collect())?;
                    self.accumulate(a, Value::R(da));
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let ta = self.real(a)?;
                    let da = Tensor::from_vec(
                        gr.dims(),
                        gr.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    )?;
                    self.accumulate(a, Value::R(da));
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let y = match &self.nodes[idx].value {
                        Value::R(t) => t.clone(),
                        _ => unreachable!(),
                    };
                    let da = Tensor::from_vec(
                        gr.dims(),
                        gr.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| gv * yv * (one - yv))
                            .collect(),
                    )?;
                    self.accumulate(a, Value::R(da));
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = as_real(&g)?.item()?;
                if self.needs(a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    self.accumulate(a, Value::R(Tensor::filled(&dims, gv)));
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let gr = as_real(&g)?.clone();
                let ta = self.real(a)?.clone();
                let tb = self.real(b)?.clone();
                let (m, k) = (ta.dims()[0], ta.dims()[1]);
                let n = tb.dims()[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gr.data()[i * n + j];
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gij * tb.data()[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, Value::R(Tensor::from_vec(&[m, k], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * gr.data()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, Value::R(Tensor::from_vec(&[k, n], db)?));
                }
            }
            Op::AddBiasRow(a, bias) => {
                let (a, bias) = (*a, *bias);
                let gr = as_real(&g)?.clone();
                let (m, n) = (gr.dims()[0], gr.dims()[1]);
                if self.needs(a) {
                    self.accumulate(a, Value::R(gr.clone()));
                }
                if self.needs(bias) {
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + gr.data()[i * n + j];
                        }
                    }
                    self.accumulate(bias, Value::R(Tensor::from_vec(&[n], db)?));
                }
            }
            Op::GlobalAvgPool(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                    let inv = one / T::of_usize(h * w);
                    let mut da = vec![T::zero(); b * k * h * w];
                    for bi in 0..b {
                        for ki in 0..k {
                            let gv = gr.data()[bi * k + ki] * inv;
                            let base = (bi * k + ki) * h * w;
                            for d in &mut da[base..base + h * w] {
                                *d = gv;
                            }
                        }
                    }
                    self.accumulate(a, Value::R(Tensor::from_vec(&dims, da)?));
                }
            }
            Op::MeanChannels(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                    let inv = one / T::of_usize(b * h * w);
                    let mut da = vec![T::zero(); b * k * h * w];
                    for bi in 0..b {
                        for ki in 0..k {
                            let gv = gr.data()[ki] * inv;
                            let base = (bi * k + ki) * h * w;
                            for d in &mut da[base..base + h * w] {
                                *d = gv;
                            }
                        }
                    }
                    self.accumulate(a, Value::R(Tensor::from_vec(&dims, da)?));
                }
            }
            Op::SubChanVec(x, v) => {
                let (x, v) = (*x, *v);
                let gr = as_real(&g)?.clone();
                let dims = gr.dims().to_vec();
                let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                if self.needs(x) {
                    self.accumulate(x, Value::R(gr.clone()));
                }
                if self.needs(v) {
                    let mut dv = vec![T::zero(); k];
                    for bi in 0..b {
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            for &gv in &gr.data()[base..base + h * w] {
                                dv[ki] = dv[ki] - gv;
                            }
                        }
                    }
                    self.accumulate(v, Value::R(Tensor::from_vec(&[k], dv)?));
                }
            }
            Op::MulChanVec(x, v) => {
                let (x, v) = (*x, *v);
                let gr = as_real(&g)?.clone();
                let tx = self.real(x)?.clone();
                let tv = self.real(v)?.clone();
                let dims = gr.dims().to_vec();
                let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                if self.needs(x) {
                    let mut dx = gr.data().to_vec();
                    for bi in 0..b {
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            let c = tv.data()[ki];
                            for d in &mut dx[base..base + h * w] {
                                *d = *d * c;
                            }
                        }
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
                if self.needs(v) {
                    let mut dv = vec![T::zero(); k];
                    for bi in 0..b {
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            for idx2 in base..base + h * w {
                                dv[ki] = dv[ki] + tx.data()[idx2] * gr.data()[idx2];
                            }
                        }
                    }
                    self.accumulate(v, Value::R(Tensor::from_vec(&[k], dv)?));
                }
            }
            Op::RsqrtEps(a, eps) => {
                let (a, eps) = (*a, *eps);
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let ta = self.real(a)?;
                    let half = T::of_f64(0.5);
                    let da = Tensor::from_vec(
                        gr.dims(),
                        gr.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&gv, &xv)| {
                                let y = one / (xv + eps).sqrt();
                                -half * y * y * y * gv
                            })
                            .collect(),
                    )?;
                    self.accumulate(a, Value::R(da));
                }
            }
            Op::MulChannelScalars(x, s) => {
                let (x, s) = (*x, *s);
                let gr = as_real(&g)?.clone();
                let tx = self.real(x)?.clone();
                let ts = self.real(s)?.clone();
                let dims = gr.dims().to_vec();
                let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                if self.needs(x) {
                    let mut dx = gr.data().to_vec();
                    for bi in 0..b {
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            let c = ts.data()[bi * k + ki];
                            for d in &mut dx[base..base + h * w] {
                                *d = *d * c;
                            }
                        }
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
                if self.needs(s) {
                    let mut ds = vec![T::zero(); b * k];
                    for bi in 0..b {
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            let mut acc = T::zero();
                            for idx2 in base..base + h * w {
                                acc = acc + tx.data()[idx2] * gr.data()[idx2];
                            }
                            ds[bi * k + ki] = acc;
                        }
                    }
                    self.accumulate(s, Value::R(Tensor::from_vec(&[b, k], ds)?));
                }
            }
            Op::MulSpatialMap(x, m) => {
                let (x, m) = (*x, *m);
                let gr = as_real(&g)?.clone();
                let tx = self.real(x)?.clone();
                let tm = self.real(m)?.clone();
                let dims = gr.dims().to_vec();
                let (b, k, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                if self.needs(x) {
                    let mut dx = gr.data().to_vec();
                    for bi in 0..b {
                        let mbase = bi * h * w;
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            for idx2 in 0..h * w {
                                dx[base + idx2] = dx[base + idx2] * tm.data()[mbase + idx2];
                            }
                        }
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
                if self.needs(m) {
                    let mut dm = vec![T::zero(); b * h * w];
                    for bi in 0..b {
                        let mbase = bi * h * w;
                        for ki in 0..k {
                            let base = (bi * k + ki) * h * w;
                            for idx2 in 0..h * w {
                                dm[mbase + idx2] = dm[mbase + idx2] + tx.data()[base + idx2] * gr.data()[base + idx2];
                            }
                        }
                    }
                    self.accumulate(m, Value::R(Tensor::from_vec(&[b, 1, h, w], dm)?));
                }
            }
            Op::ConvexCombo { a, b, w } => {
                let (a, b, w) = (*a, *b, *w);
                let gr = as_real(&g)?.clone();
                let wv = self.real(w)?.item()?;
                if self.needs(a) {
                    let da = Tensor::from_vec(gr.dims(), gr.data().iter().map(|&v| v * wv).collect())?;
                    self.accumulate(a, Value::R(da));
                }
                if self.needs(b) {
                    let db = Tensor::from_vec(gr.dims(), gr.data().iter().map(|&v| v * (one - wv)).collect())?;
                    self.accumulate(b, Value::R(db));
                }
                if self.needs(w) {
                    let ta = self.real(a)?;
                    let tb = self.real(b)?;
                    let mut acc = T::zero();
                    for ((&av, &bv), &gv) in ta.data().iter().zip(tb.data()).zip(gr.data()) {
                        acc = acc + (av - bv) * gv;
                    }
                    self.accumulate(w, Value::R(Tensor::scalar(acc)));
                }
            }
            Op::Conv2d { x, w, b, dilation } => {
                let (x, w, b, dilation) = (*x, *w, *b, *dilation);
                let gr = as_real(&g)?.clone();
                self.conv2d_backward(x, w, b, dilation, &gr)?;
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let gr = as_real(&g)?.clone();
                if self.needs(x) {
                    let dims = self.nodes[x.0].value.dims().to_vec();
                    let mut dx = vec![T::zero(); dims.iter().product()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] = dx[src] + gr.data()[o];
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    self.accumulate(a, Value::R(gr.reshaped(&dims)?));
                }
            }
            Op::Concat { axis, parts } => {
                let axis = *axis;
                let parts = parts.clone();
                let gr = as_real(&g)?.clone();
                let odims = gr.dims().to_vec();
                let outer: usize = odims[..axis].iter().product();
                let inner: usize = odims[axis + 1..].iter().product();
                let axis_total = odims[axis];
                let mut offset = 0usize;
                for &p in &parts {
                    let pdims = self.nodes[p.0].value.dims().to_vec();
                    let pa = pdims[axis];
                    if self.needs(p) {
                        let mut dp = vec![T::zero(); pdims.iter().product()];
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            dp[o * pa * inner..(o + 1) * pa * inner]
                                .copy_from_slice(&gr.data()[src_base..src_base + pa * inner]);
                        }
                        self.accumulate(p, Value::R(Tensor::from_vec(&pdims, dp)?));
                    }
                    offset += pa;
                }
            }
            Op::SliceChannel { x, c } => {
                let (x, c) = (*x, *c);
                let gr = as_real(&g)?.clone();
                if self.needs(x) {
                    let dims = self.nodes[x.0].value.dims().to_vec();
                    let (b, cc, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                    let mut dx = vec![T::zero(); b * cc * h * w];
                    for bi in 0..b {
                        let dst = (bi * cc + c) * h * w;
                        dx[dst..dst + h * w].copy_from_slice(&gr.data()[bi * h * w..(bi + 1) * h * w]);
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
            }
            Op::Subsample { x, factor } => {
                let (x, factor) = (*x, *factor);
                let gr = as_real(&g)?.clone();
                if self.needs(x) {
                    let dims = self.nodes[x.0].value.dims().to_vec();
                    let r = dims.len();
                    let (h, w) = (dims[r - 2], dims[r - 1]);
                    let lead: usize = dims[..r - 2].iter().product();
                    let (oh, ow) = (h / factor, w / factor);
                    let mut dx = vec![T::zero(); lead * h * w];
                    for p in 0..lead {
                        let gbase = p * oh * ow;
                        let xbase = p * h * w;
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[xbase + i * factor * w + j * factor] = gr.data()[gbase + i * ow + j];
                            }
                        }
                    }
                    self.accumulate(x, Value::R(Tensor::from_vec(&dims, dx)?));
                }
            }
            Op::BilinearUpsample(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let dims = self.nodes[a.0].value.dims().to_vec();
                    let r = dims.len();
                    let (ih, iw) = (dims[r - 2], dims[r - 1]);
                    let odims = gr.dims().to_vec();
                    let (oh, ow) = (odims[r - 2], odims[r - 1]);
                    let rows = super::bilinear_axis_weights(ih, oh);
                    let cols = super::bilinear_axis_weights(iw, ow);
                    let lead: usize = dims[..r - 2].iter().product();
                    let mut dx = vec![T::zero(); lead * ih * iw];
                    for p in 0..lead {
                        let gbase = p * oh * ow;
                        let xbase = p * ih * iw;
                        for (i, &(i0, i1, ti)) in rows.iter().enumerate() {
                            let ti = T::of_f64(ti);
                            for (j, &(j0, j1, tj)) in cols.iter().enumerate() {
                                let tj = T::of_f64(tj);
                                let gv = gr.data()[gbase + i * ow + j];
                                dx[xbase + i0 * iw + j0] = dx[xbase + i0 * iw + j0] + (one - ti) * (one - tj) * gv;
                                dx[xbase + i0 * iw + j1] = dx[xbase + i0 * iw + j1] + (one - ti) * tj * gv;
                                dx[xbase + i1 * iw + j0] = dx[xbase + i1 * iw + j0] + ti * (one - tj) * gv;
                                dx[xbase + i1 * iw + j1] = dx[xbase + i1 * iw + j1] + ti * tj * gv;
                            }
                        }
                    }
                    self.accumulate(a, Value::R(Tensor::from_vec(&dims, dx)?));
                }
            }
            Op::Fft2(a) => {
                let a = *a;
                let gc = as_complex(&g)?.clone();
                if self.needs(a) {
                    let (h, w) = gc.spatial()?;
                    let mut back = fft::ifft2_c(&gc)?;
                    let hw = T::of_usize(h * w);
                    for z in back.data_mut() {
                        *z = Complex::new(z.re * hw, z.im * hw);
                    }
                    self.accumulate(a, Value::R(back.real_part()));
                }
            }
            Op::Ifft2(a) => {
                let a = *a;
                let gc = as_complex(&g)?.clone();
                if self.needs(a) {
                    let (h, w) = gc.spatial()?;
                    let mut back = fft::fft2_c(&gc)?;
                    let inv = T::one() / T::of_usize(h * w);
                    for z in back.data_mut() {
                        *z = Complex::new(z.re * inv, z.im * inv);
                    }
                    self.accumulate(a, Value::C(back));
                }
            }
            Op::SpectralMulConst { x, filt } => {
                let x = *x;
                let filt = filt.clone();
                let gc = as_complex(&g)?.clone();
                if self.needs(x) {
                    let (h, w) = gc.spatial()?;
                    let plane = h * w;
                    let mut dx = gc;
                    for p in dx.data_mut().chunks_mut(plane) {
                        for (z, &f) in p.iter_mut().zip(filt.data()) {
                            *z = Complex::new(z.re * f, z.im * f);
                        }
                    }
                    self.accumulate(x, Value::C(dx));
                }
            }
            Op::Modulus(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let tz = self.complex(a)?;
                    let data: Vec<Complex<T>> = tz
                        .data()
                        .iter()
                        .zip(gr.data())
                        .map(|(z, &gv)| {
                            let m = z.norm();
                            if m > T::zero() {
                                Complex::new(z.re / m * gv, z.im / m * gv)
                            } else {
                                Complex::new(T::zero(), T::zero())
                            }
                        })
                        .collect();
                    let dz = CTensor::from_vec(tz.dims(), data)?;
                    self.accumulate(a, Value::C(dz));
                }
            }
            Op::RealPart(a) => {
                let a = *a;
                let gr = as_real(&g)?.clone();
                if self.needs(a) {
                    let data: Vec<Complex<T>> = gr.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
                    let dz = CTensor::from_vec(gr.dims(), data)?;
                    self.accumulate(a, Value::C(dz));
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let gv = as_real(&g)?.item()?;
                if self.needs(logits) {
                    let tl = self.real(logits)?;
                    let n = T::of_usize(tl.numel());
                    let dz = Tensor::from_vec(
                        tl.dims(),
                        tl.data()
                            .iter()
                            .zip(labels.data())
                            .map(|(&z, &y)| {
                                let s = one / (one + (-z).exp());
                                (s - y) / n * gv
                            })
                            .collect(),
                    )?;
                    self.accumulate(logits, Value::R(dz));
                }
            }
        }
        Ok(())
    }
}

/// One kernel tap with its precomputed valid output ranges, so the conv
/// inner loops stay branch-free.
struct ConvTap {
    k_idx: usize,
    oi: usize,
    oj: usize,
    i_lo: usize,
    i_hi: usize,
    j_lo: usize,
    j_hi: usize,
}

fn conv_taps(k: usize, dilation: usize, pad: usize, h: usize, w: usize) -> Vec<ConvTap> {
    let mut taps = Vec::with_capacity(k * k);
    for di in 0..k {
        let oi = di * dilation;
        // output i maps to input i + oi - pad, which must land in [0, h)
        let i_lo = pad.saturating_sub(oi);
        let i_hi = h.min((h + pad).saturating_sub(oi)).max(i_lo);
        for dj in 0..k {
            let oj = dj * dilation;
            let j_lo = pad.saturating_sub(oj);
            let j_hi = w.min((w + pad).saturating_sub(oj)).max(j_lo);
            taps.push(ConvTap { k_idx: di * k + dj, oi, oj, i_lo, i_hi, j_lo, j_hi });
        }
    }
    taps
}

fn as_real<T: Real>(v: &Value<T>) -> Result<&Tensor<T>> {
    match v {
        Value::R(t) => Ok(t),
        Value::C(_) => Err(Error::KindMismatch { expected: "real", got: "complex" }),
    }
}

fn as_complex<T: Real>(v: &Value<T>) -> Result<&CTensor<T>> {
    match v {
        Value::C(t) => Ok(t),
        Value::R(_) => Err(Error::KindMismatch { expected: "complex", got: v.kind() }),
    }
}

/// Corner-aligned separable bilinear interpolation of the last two axes.
pub fn bilinear_resize_last2<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let (ih, iw) = x.spatial()?;
    if ih == oh && iw == ow {
        return Ok(x.clone());
    }
    let rows = super::bilinear_axis_weights(ih, oh);
    let cols = super::bilinear_axis_weights(iw, ow);
    let lead: usize = x.dims()[..x.dims().len() - 2].iter().product();
    let one = T::one();
    let mut out = vec![T::zero(); lead * oh * ow];
    for p in 0..lead {
        let xbase = p * ih * iw;
        let obase = p * oh * ow;
        for (i, &(i0, i1, ti)) in rows.iter().enumerate() {
            let ti = T::of_f64(ti);
            for (j, &(j0, j1, tj)) in cols.iter().enumerate() {
                let tj = T::of_f64(tj);
                let v = (one - ti) * (one - tj) * x.data()[xbase + i0 * iw + j0]
                    + (one - ti) * tj * x.data()[xbase + i0 * iw + j1]
                    + ti * (one - tj) * x.data()[xbase + i1 * iw + j0]
                    + ti * tj * x.data()[xbase + i1 * iw + j1];
                out[obase + i * ow + j] = v;
            }
        }
    }
    let mut odims = x.dims().to_vec();
    let r = odims.len();
    odims[r - 2] = oh;
    odims[r - 1] = ow;
    Tensor::from_vec(&odims, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[2, 3], 1.5), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), true).unwrap();
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn modulus_value_and_gradient() {
        // |3+4i| = 5, d|z|/dre = 3/5
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap(), true).unwrap();
        // route through fft2 of an impulse-like input to obtain a complex node
        // is roundabout; construct the complex value directly instead.
        let spec = g.fft2(x).unwrap();
        // fft of [[3,0],[0,0]] is flat 3+0i; use modulus and sum.
        let m = g.modulus(spec).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.real(m).unwrap().data(), &[3.0; 4]);
        // each of the 4 bins contributes d|3|/dx00 = 1
        assert!((g.grad(x).unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn modulus_gradient_zero_at_origin() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        let spec = g.fft2(x).unwrap();
        let m = g.modulus(spec).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn modulus_rejects_real_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), false).unwrap();
        assert!(matches!(g.modulus(x), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(3))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = g.leaf(Tensor::scalar(1.0), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::<f32>::new();
        let x = g
            .leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(), false).unwrap();
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.real(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_kernel_with_bias_gives_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]), false).unwrap();
        let w = g.leaf(Tensor::zeros(&[3, 2, 3, 3]), false).unwrap();
        let b = g.leaf(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap(), false).unwrap();
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        let yd = g.real(y).unwrap();
        assert_eq!(yd.dims(), &[1, 3, 4, 4]);
        assert!(yd.data()[..16].iter().all(|&v| v == 0.5));
        assert!(yd.data()[16..32].iter().all(|&v| v == -1.0));
        assert!(yd.data()[32..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dilated_conv_receptive_field() {
        // 3x3 kernel at dilation 3 reaches offsets of exactly 3;
        // a pixel at offset (3,3) from the center affects the center output,
        // one at (4,0) does not.
        let n = 9;
        let center = n / 2;
        let run = |hot: Option<(usize, usize)>| -> f32 {
            let mut g = Graph::<f32>::new();
            let mut xt = Tensor::zeros(&[1, 1, n, n]);
            if let Some((i, j)) = hot {
                xt.data_mut()[i * n + j] = 1.0;
            }
            let x = g.leaf(xt, false).unwrap();
            let w = g.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0), false).unwrap();
            let y = g.conv2d(x, w, None, 3).unwrap();
            g.real(y).unwrap().data()[center * n + center]
        };
        let base = run(None);
        assert_ne!(run(Some((center + 3, center + 3))), base);
        assert_eq!(run(Some((center + 4, center))), base);
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for &(b, cin, cout, h, w, k, dil) in
            &[(2usize, 3usize, 4usize, 7usize, 9usize, 3usize, 1usize), (1, 2, 2, 8, 8, 3, 2), (2, 1, 3, 10, 6, 3, 3), (1, 4, 2, 5, 5, 1, 1)]
        {
            let xd: Vec<f64> = (0..b * cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wd: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bd: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_vec(&[b, cin, h, w], xd.clone()).unwrap(), false).unwrap();
            let wt = g.leaf(Tensor::from_vec(&[cout, cin, k, k], wd.clone()).unwrap(), false).unwrap();
            let bt = g.leaf(Tensor::from_vec(&[cout], bd.clone()).unwrap(), false).unwrap();
            let y = g.conv2d(x, wt, Some(bt), dil).unwrap();
            let got = g.real(y).unwrap();

            // direct cross-correlation with zero padding
            let pad = dil * (k - 1) / 2;
            for bi in 0..b {
                for oc in 0..cout {
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = bd[oc];
                            for ic in 0..cin {
                                for di in 0..k {
                                    for dj in 0..k {
                                        let ii = i as isize + (di * dil) as isize - pad as isize;
                                        let jj = j as isize + (dj * dil) as isize - pad as isize;
                                        if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                            acc += xd[((bi * cin + ic) * h + ii as usize) * w + jj as usize]
                                                * wd[((oc * cin + ic) * k + di) * k + dj];
                                        }
                                    }
                                }
                            }
                            let gv = got.data()[((bi * cout + oc) * h + i) * w + j];
                            assert!((gv - acc).abs() < 1e-12, "(b={bi},oc={oc},i={i},j={j}) {gv} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::scalar(1e38), false).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn convex_combo_endpoints() {
        let a_t = Tensor::from_vec(&[3], vec![2.0f64, 2.0, 2.0]).unwrap();
        let b_t = Tensor::from_vec(&[3], vec![0.0f64, 1.0, -1.0]).unwrap();
        for (wv, expect_a) in [(0.0, false), (1.0, true)] {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(a_t.clone(), false).unwrap();
            let b = g.leaf(b_t.clone(), false).unwrap();
            let w = g.leaf(Tensor::scalar(wv), false).unwrap();
            let f = g.convex_combo(a, b, w).unwrap();
            let expected = if expect_a { &a_t } else { &b_t };
            assert_eq!(g.real(f).unwrap().data(), expected.data());
        }
    }

    #[test]
    fn bce_matches_known_values() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(), false).unwrap();
        let loss = g.bce_with_logits(z, &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        assert!((g.real(loss).unwrap().item().unwrap() - (2.0f64).ln()).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_vec(&[1, 1], vec![50.0]).unwrap(), false).unwrap();
        let loss = g.bce_with_logits(z, &Tensor::from_vec(&[1, 1], vec![0.0]).unwrap()).unwrap();
        let v = g.real(loss).unwrap().item().unwrap();
        assert!(v.is_finite() && (v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn maxpool_shape_and_routing() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(
                Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap(),
                true,
            )
            .unwrap();
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.real(y).unwrap().data(), &[5.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
