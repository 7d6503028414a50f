//! Reverse-mode autodiff over dense tensors, with exactly the operator set
//! the prediction models need, an RMSProp optimizer, a finite-difference
//! gradient checker and the binary checkpoint format.
//!
//! Tensors are row-major; images and feature maps use H x W x C layout and
//! convolution kernels use [kh][kw][cin][cout] so the innermost loops run
//! over contiguous output channels. Shape agreement between operands is a
//! programming contract: operators panic on violation. Fallible surfaces
//! (checkpoint I/O) return typed errors.
//!
//! The element type is generic so the same graph code runs in f32 for
//! training and in f64 for gradient checking.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::io::{Read as _, Write as _};
use std::ops::AddAssign;
use std::path::Path;
use thiserror::Error;

pub trait Element:
    Float + FromPrimitive + ToPrimitive + AddAssign + Debug + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    #[inline]
    fn f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint checksum mismatch")]
    BadChecksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); n] }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| F::of(v.f64())).collect() }
    }
}

/// Gaussian-initialized tensor with std 1/sqrt(fan_in).
pub fn init_gaussian<E: Element, R: rand::Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
    use rand_distr::Distribution;
    let std = 1.0 / (fan_in as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| E::of(normal.sample(rng))).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// y = W x with W: [m, n], x: n elements.
    MatVec(NodeId, NodeId),
    Conv2d { x: NodeId, k: NodeId, b: NodeId, stride: usize, pad: usize },
    Deconv2d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ScaledSigmoid { x: NodeId, lambda: f64, alpha: f64 },
    Ln(NodeId),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Softmax2d(NodeId),
    LogSumExp(NodeId),
    Gather { x: NodeId, index: usize },
    Sum(NodeId),
    Narrow { x: NodeId, offset: usize, len: usize },
    Reshape(NodeId),
    ChannelSlice { x: NodeId, channel: usize },
    L2NormChannels(NodeId),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Single-threaded; build one per forward pass.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

/// Gradients vanishing through many recurrent steps leave whole planes of
/// subnormal f32s, and x86 handles subnormal arithmetic in microcode, two
/// orders of magnitude slower than the normal path. Below the normal range
/// everything is noise to the optimiser, so the thread flushes it to zero
/// (MXCSR FZ and DAZ bits). Sticky per thread; a no-op elsewhere.
fn flush_subnormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr: u32 = 0;
        core::arch::asm!("stmxcsr [{0}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        core::arch::asm!("ldmxcsr [{0}]", in(reg) &csr, options(nostack, readonly));
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        flush_subnormals();
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward() root w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(E::of(v)))
    }

    fn zip_elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(E, E) -> E, op: Op) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "elementwise operands must agree in shape");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        let ng = self.wants(&[a, b]);
        self.push(value, op, ng)
    }

    fn map_elementwise(&mut self, a: NodeId, f: impl Fn(E) -> E, op: Op) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| f(*x)).collect() };
        let ng = self.wants(&[a]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = E::of(c);
        self.map_elementwise(a, |x| x * cc, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = E::of(c);
        self.map_elementwise(a, |x| x + cc, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| if x > E::zero() { x } else { E::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// lambda * sigmoid(x) + alpha, squashing into (alpha, alpha + lambda).
    pub fn scaled_sigmoid(&mut self, a: NodeId, lambda: f64, alpha: f64) -> NodeId {
        assert!(lambda > 0.0);
        let (l, al) = (E::of(lambda), E::of(alpha));
        self.map_elementwise(a, |x| l * sigmoid_scalar(x) + al, Op::ScaledSigmoid { x: a, lambda, alpha })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        assert_eq!(tw.shape.len(), 2, "matvec weight must be 2-d");
        let (m, n) = (tw.shape[0], tw.shape[1]);
        assert_eq!(tx.len(), n, "matvec input length must match weight columns");
        let mut out = vec![E::zero(); m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &tw.data[i * n..(i + 1) * n];
            let mut acc = E::zero();
            for (a, b) in row.iter().zip(&tx.data) {
                acc += *a * *b;
            }
            *o = acc;
        }
        let ng = self.wants(&[w, x]);
        self.push(Tensor::new(vec![m], out), Op::MatVec(w, x), ng)
    }

    /// W x + b.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    /// Cross-correlation of x: [h, w, cin] with k: [kh, kw, cin, cout] plus
    /// bias b: [cout]. Output is [floor((h + 2 pad - kh)/stride) + 1, ., cout];
    /// windows overhanging the padded right/bottom edge are dropped.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let (tx, tk, tb) = (&self.nodes[x.0].value, &self.nodes[k.0].value, &self.nodes[b.0].value);
        assert!(stride >= 1);
        assert_eq!(tx.shape.len(), 3, "conv input must be h x w x c");
        assert_eq!(tk.shape.len(), 4, "conv kernel must be kh x kw x cin x cout");
        let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (kh, kw, kci, cout) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        assert_eq!(kci, cin, "kernel cin must match input channels");
        assert_eq!(tb.len(), cout, "bias length must match cout");
        assert!(h + 2 * pad >= kh, "conv kernel taller than padded input");
        assert!(w + 2 * pad >= kw, "conv kernel wider than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![E::zero(); oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[(oy * ow + ox) * cout..][..cout];
                orow.copy_from_slice(&tb.data);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = &tx.data[((iy as usize) * w + ix as usize) * cin..][..cin];
                        let kbase = ((ky * kw + kx) * cin) * cout;
                        for (ci, xv) in xrow.iter().enumerate() {
                            let krow = &tk.data[kbase + ci * cout..][..cout];
                            for co in 0..cout {
                                orow[co] += *xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.wants(&[x, k, b]);
        self.push(Tensor::new(vec![oh, ow, cout], out), Op::Conv2d { x, k, b, stride, pad }, ng)
    }

    /// Transposed convolution (adjoint of conv2d with pad 0): x: [h, w, cin]
    /// scatters through k: [kh, kw, cin, cout] into
    /// [(h-1) stride + kh, (w-1) stride + kw, cout].
    pub fn deconv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> NodeId {
        let (tx, tk, tb) = (&self.nodes[x.0].value, &self.nodes[k.0].value, &self.nodes[b.0].value);
        assert!(stride >= 1);
        assert_eq!(tx.shape.len(), 3, "deconv input must be h x w x c");
        assert_eq!(tk.shape.len(), 4, "deconv kernel must be kh x kw x cin x cout");
        let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (kh, kw, kci, cout) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        assert_eq!(kci, cin, "kernel cin must match input channels");
        assert_eq!(tb.len(), cout, "bias length must match cout");
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let mut out = vec![E::zero(); oh * ow * cout];
        for chunk in out.chunks_exact_mut(cout) {
            chunk.copy_from_slice(&tb.data);
        }
        for iy in 0..h {
            for ix in 0..w {
                let xrow = &tx.data[(iy * w + ix) * cin..][..cin];
                for ky in 0..kh {
                    let oy = iy * stride + ky;
                    for kx in 0..kw {
                        let ox = ix * stride + kx;
                        let orow_base = (oy * ow + ox) * cout;
                        let kbase = ((ky * kw + kx) * cin) * cout;
                        for (ci, xv) in xrow.iter().enumerate() {
                            let krow = &tk.data[kbase + ci * cout..][..cout];
                            let orow = &mut out[orow_base..orow_base + cout];
                            for co in 0..cout {
                                orow[co] += *xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.wants(&[x, k, b]);
        self.push(Tensor::new(vec![oh, ow, cout], out), Op::Deconv2d { x, k, b, stride }, ng)
    }

    /// Softmax over all entries, stabilized by max subtraction.
    pub fn softmax2d(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let m = ta.data.iter().cloned().fold(E::neg_infinity(), E::max);
        let exps: Vec<E> = ta.data.iter().map(|x| (*x - m).exp()).collect();
        let total = exps.iter().fold(E::zero(), |s, v| s + *v);
        let value = Tensor { shape: ta.shape.clone(), data: exps.into_iter().map(|v| v / total).collect() };
        let ng = self.wants(&[a]);
        self.push(value, Op::Softmax2d(a), ng)
    }

    /// log(sum(exp(x))) over all entries, as a scalar.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let m = ta.data.iter().cloned().fold(E::neg_infinity(), E::max);
        let total = ta.data.iter().map(|x| (*x - m).exp()).fold(E::zero(), |s, v| s + v);
        let value = Tensor::scalar(m + total.ln());
        let ng = self.wants(&[a]);
        self.push(value, Op::LogSumExp(a), ng)
    }

    /// Single element by flat index, as a scalar.
    pub fn gather(&mut self, a: NodeId, index: usize) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert!(index < ta.len(), "gather index out of range");
        let value = Tensor::scalar(ta.data[index]);
        let ng = self.wants(&[a]);
        self.push(value, Op::Gather { x: a, index }, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::scalar(ta.data.iter().fold(E::zero(), |s, v| s + *v));
        let ng = self.wants(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Contiguous slice of the flattened tensor, as a vector.
    pub fn narrow(&mut self, a: NodeId, offset: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert!(offset + len <= ta.len(), "narrow out of range");
        let value = Tensor::new(vec![len], ta.data[offset..offset + len].to_vec());
        let ng = self.wants(&[a]);
        self.push(value, Op::Narrow { x: a, offset, len }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(shape.iter().product::<usize>(), ta.len(), "reshape must preserve element count");
        let value = Tensor { shape, data: ta.data.clone() };
        let ng = self.wants(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// One channel of an [h, w, c] tensor as [h, w, 1].
    pub fn channel_slice(&mut self, a: NodeId, channel: usize) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape.len(), 3);
        let (h, w, c) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        assert!(channel < c);
        let data = (0..h * w).map(|i| ta.data[i * c + channel]).collect();
        let ng = self.wants(&[a]);
        self.push(Tensor::new(vec![h, w, 1], data), Op::ChannelSlice { x: a, channel }, ng)
    }

    /// Divides every channel plane of an [h, w, c] tensor by the plane's L2
    /// norm plus 1e-8.
    pub fn l2_normalize_channels(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape.len(), 3);
        let (h, w, c) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let eps = E::of(L2_NORM_EPS);
        let mut data = ta.data.clone();
        for ch in 0..c {
            let mut s = E::zero();
            for i in 0..h * w {
                let v = ta.data[i * c + ch];
                s += v * v;
            }
            let d = s.sqrt() + eps;
            for i in 0..h * w {
                data[i * c + ch] = data[i * c + ch] / d;
            }
        }
        let ng = self.wants(&[a]);
        self.push(Tensor { shape: ta.shape.clone(), data }, Op::L2NormChannels(a), ng)
    }

    fn accumulate(&mut self, id: NodeId, contribution: &[E]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += *b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively into
    /// every recorded node with `needs_grad`; query them with `grad()`.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![E::one()]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<E> = g.iter().zip(&self.nodes[b.0].value.data).map(|(g, y)| *g * *y).collect();
                    let db: Vec<E> = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| *g * *x).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Div(a, b) => {
                    let xa = &self.nodes[a.0].value.data;
                    let xb = &self.nodes[b.0].value.data;
                    let da: Vec<E> = g.iter().zip(xb).map(|(g, y)| *g / *y).collect();
                    let db: Vec<E> =
                        g.iter().zip(xa.iter().zip(xb)).map(|(g, (x, y))| -*g * *x / (*y * *y)).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Neg(a) => {
                    let da: Vec<E> = g.iter().map(|v| -*v).collect();
                    self.accumulate(a, &da);
                }
                Op::Scale(a, c) => {
                    let cc = E::of(c);
                    let da: Vec<E> = g.iter().map(|v| *v * cc).collect();
                    self.accumulate(a, &da);
                }
                Op::AddConst(a) => self.accumulate(a, &g),
                Op::MatVec(w, x) => {
                    let tw = &self.nodes[w.0].value;
                    let (m, n) = (tw.shape[0], tw.shape[1]);
                    if self.nodes[w.0].needs_grad {
                        let tx = &self.nodes[x.0].value;
                        let mut dw = vec![E::zero(); m * n];
                        for i in 0..m {
                            let gi = g[i];
                            let row = &mut dw[i * n..(i + 1) * n];
                            for (r, xv) in row.iter_mut().zip(&tx.data) {
                                *r = gi * *xv;
                            }
                        }
                        self.accumulate(w, &dw);
                    }
                    if self.nodes[x.0].needs_grad {
                        let tw = &self.nodes[w.0].value;
                        let mut dx = vec![E::zero(); n];
                        for i in 0..m {
                            let gi = g[i];
                            let row = &tw.data[i * n..(i + 1) * n];
                            for (d, wv) in dx.iter_mut().zip(row) {
                                *d += gi * *wv;
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Conv2d { x, k, b, stride, pad } => {
                    self.backward_conv2d(x, k, b, stride, pad, &g);
                }
                Op::Deconv2d { x, k, b, stride } => {
                    self.backward_deconv2d(x, k, b, stride, &g);
                }
                Op::Relu(a) => {
                    let da: Vec<E> = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<E> = g
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, s)| *g * *s * (E::one() - *s))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<E> = g
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, t)| *g * (E::one() - *t * *t))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::ScaledSigmoid { x, lambda, alpha } => {
                    let (l, al) = (E::of(lambda), E::of(alpha));
                    let da: Vec<E> = g
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, y)| {
                            let s = (*y - al) / l;
                            *g * l * s * (E::one() - s)
                        })
                        .collect();
                    self.accumulate(x, &da);
                }
                Op::Ln(a) => {
                    let da: Vec<E> = g.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| *g / *x).collect();
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<E> = g.iter().zip(&self.nodes[i].value.data).map(|(g, y)| *g * *y).collect();
                    self.accumulate(a, &da);
                }
                Op::Sin(a) => {
                    let da: Vec<E> =
                        g.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| *g * x.cos()).collect();
                    self.accumulate(a, &da);
                }
                Op::Cos(a) => {
                    let da: Vec<E> =
                        g.iter().zip(&self.nodes[a.0].value.data).map(|(g, x)| -*g * x.sin()).collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax2d(a) => {
                    let y = &self.nodes[i].value.data;
                    let dot = g.iter().zip(y).fold(E::zero(), |s, (g, y)| s + *g * *y);
                    let da: Vec<E> = g.iter().zip(y).map(|(g, y)| *y * (*g - dot)).collect();
                    self.accumulate(a, &da);
                }
                Op::LogSumExp(a) => {
                    let ta = &self.nodes[a.0].value;
                    let m = ta.data.iter().cloned().fold(E::neg_infinity(), E::max);
                    let exps: Vec<E> = ta.data.iter().map(|x| (*x - m).exp()).collect();
                    let total = exps.iter().fold(E::zero(), |s, v| s + *v);
                    let da: Vec<E> = exps.iter().map(|e| g[0] * *e / total).collect();
                    self.accumulate(a, &da);
                }
                Op::Gather { x, index } => {
                    let mut dx = vec![E::zero(); self.nodes[x.0].value.len()];
                    dx[index] = g[0];
                    self.accumulate(x, &dx);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].value.len()];
                    self.accumulate(a, &da);
                }
                Op::Narrow { x, offset, len } => {
                    let mut dx = vec![E::zero(); self.nodes[x.0].value.len()];
                    dx[offset..offset + len].copy_from_slice(&g);
                    self.accumulate(x, &dx);
                }
                Op::Reshape(a) => self.accumulate(a, &g),
                Op::ChannelSlice { x, channel } => {
                    let tx = &self.nodes[x.0].value;
                    let c = tx.shape[2];
                    let mut dx = vec![E::zero(); tx.len()];
                    for (i, gv) in g.iter().enumerate() {
                        dx[i * c + channel] = *gv;
                    }
                    self.accumulate(x, &dx);
                }
                Op::L2NormChannels(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (h, w, c) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                    let eps = E::of(L2_NORM_EPS);
                    let mut da = vec![E::zero(); ta.len()];
                    for ch in 0..c {
                        let mut s = E::zero();
                        let mut gx = E::zero();
                        for i in 0..h * w {
                            let v = ta.data[i * c + ch];
                            s += v * v;
                            gx += g[i * c + ch] * v;
                        }
                        let n = s.sqrt();
                        let d = n + eps;
                        for i in 0..h * w {
                            let idx = i * c + ch;
                            da[idx] = g[idx] / d;
                            if n > E::zero() {
                                da[idx] = da[idx] - ta.data[idx] * gx / (n * d * d);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
        }
    }

    fn backward_conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize, pad: usize, g: &[E]) {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[k.0].value;
        let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (kh, kw, _, cout) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let want_x = self.nodes[x.0].needs_grad;
        let want_k = self.nodes[k.0].needs_grad;
        let want_b = self.nodes[b.0].needs_grad;
        let mut dx = if want_x { vec![E::zero(); tx.len()] } else { Vec::new() };
        let mut dk = if want_k { vec![E::zero(); tk.len()] } else { Vec::new() };
        let mut db = if want_b { vec![E::zero(); cout] } else { Vec::new() };
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &g[(oy * ow + ox) * cout..][..cout];
                if want_b {
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += *gv;
                    }
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((iy as usize) * w + ix as usize) * cin;
                        let kbase = ((ky * kw + kx) * cin) * cout;
                        for ci in 0..cin {
                            let krow = &tk.data[kbase + ci * cout..][..cout];
                            if want_k {
                                let xv = tx.data[ibase + ci];
                                let drow = &mut dk[kbase + ci * cout..][..cout];
                                for co in 0..cout {
                                    drow[co] += xv * grow[co];
                                }
                            }
                            if want_x {
                                let mut acc = E::zero();
                                for co in 0..cout {
                                    acc += krow[co] * grow[co];
                                }
                                dx[ibase + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(x, &dx);
        }
        if want_k {
            self.accumulate(k, &dk);
        }
        if want_b {
            self.accumulate(b, &db);
        }
    }

    fn backward_deconv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize, g: &[E]) {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[k.0].value;
        let (h, w, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (kh, kw, _, cout) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        let ow = (w - 1) * stride + kw;
        let want_x = self.nodes[x.0].needs_grad;
        let want_k = self.nodes[k.0].needs_grad;
        let want_b = self.nodes[b.0].needs_grad;
        let mut dx = if want_x { vec![E::zero(); tx.len()] } else { Vec::new() };
        let mut dk = if want_k { vec![E::zero(); tk.len()] } else { Vec::new() };
        let mut db = if want_b { vec![E::zero(); cout] } else { Vec::new() };
        if want_b {
            for grow in g.chunks_exact(cout) {
                for (d, gv) in db.iter_mut().zip(grow) {
                    *d += *gv;
                }
            }
        }
        for iy in 0..h {
            for ix in 0..w {
                let ibase = (iy * w + ix) * cin;
                for ky in 0..kh {
                    let oy = iy * stride + ky;
                    for kx in 0..kw {
                        let ox = ix * stride + kx;
                        let grow = &g[(oy * ow + ox) * cout..][..cout];
                        let kbase = ((ky * kw + kx) * cin) * cout;
                        for ci in 0..cin {
                            let krow = &tk.data[kbase + ci * cout..][..cout];
                            if want_x {
                                let mut acc = E::zero();
                                for co in 0..cout {
                                    acc += krow[co] * grow[co];
                                }
                                dx[ibase + ci] += acc;
                            }
                            if want_k {
                                let xv = tx.data[ibase + ci];
                                let drow = &mut dk[kbase + ci * cout..][..cout];
                                for co in 0..cout {
                                    drow[co] += xv * grow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(x, &dx);
        }
        if want_k {
            self.accumulate(k, &dk);
        }
        if want_b {
            self.accumulate(b, &db);
        }
    }
}

pub const L2_NORM_EPS: f64 = 1e-8;

fn sigmoid_scalar<E: Element>(x: E) -> E {
    // Branch keeps exp() off large positive arguments in both directions.
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// One LSTM step. `wx`: [4H, D], `wh`: [4H, H], `b`: [4H]; gate blocks are
/// ordered (input, forget, candidate, output). Returns (h', c').
pub fn lstm_cell<E: Element>(
    tape: &mut Tape<E>,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
) -> (NodeId, NodeId) {
    let hidden = tape.value(h).len();
    assert_eq!(tape.value(wx).shape()[0], 4 * hidden, "wx rows must be 4 x hidden");
    assert_eq!(tape.value(c).len(), hidden);
    let zx = tape.affine(wx, x, b);
    let zh = tape.matvec(wh, h);
    let z = tape.add(zx, zh);
    let zi = tape.narrow(z, 0, hidden);
    let zf = tape.narrow(z, hidden, hidden);
    let zg = tape.narrow(z, 2 * hidden, hidden);
    let zo = tape.narrow(z, 3 * hidden, hidden);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let gg = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, gg);
    let c2 = tape.add(fc, ig);
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc);
    (h2, c2)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { lr: 1e-4, decay: 0.9, eps: 1e-8 }
    }
}

use serde::{Deserialize, Serialize};

/// Per-parameter running mean of squared gradients.
#[derive(Debug, Clone)]
pub struct OptimizerState<E> {
    pub cfg: RmsPropConfig,
    v: Vec<Vec<E>>,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(cfg: RmsPropConfig, params: &[Tensor<E>]) -> Self {
        OptimizerState { cfg, v: params.iter().map(|p| vec![E::zero(); p.len()]).collect() }
    }

    /// v <- decay v + (1 - decay) g^2; p <- p - lr g / (sqrt(v) + eps).
    pub fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) {
        assert_eq!(params.len(), self.v.len());
        assert_eq!(params.len(), grads.len());
        let decay = E::of(self.cfg.decay);
        let omd = E::one() - decay;
        let lr = E::of(self.cfg.lr);
        let eps = E::of(self.cfg.eps);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.v.iter_mut()) {
            assert_eq!(p.len(), g.len(), "param/grad shape mismatch");
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = decay * *vv + omd * *gv * *gv;
                *pv = *pv - lr * *gv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Central-difference check of d(f)/d(x) against the tape gradient at `x0`.
///
/// `f` must rebuild the graph from its leaf argument on every call. Large
/// inputs are stride-subsampled down to `max_coords` probes; rel. error is
/// |a - n| / max(|a|, |n|, 1).
pub fn grad_check<F>(name: &str, f: F, x0: &Tensor<f64>, h: f64, tol: f64, max_coords: usize) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = f(&mut tape, x);
    assert_eq!(tape.value(y).len(), 1, "grad_check target must be scalar");
    tape.backward(y);
    let analytic = tape.grad(x).expect("gradient must reach the checked leaf").to_vec();

    let eval = |t: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone(), false);
        let y = f(&mut tape, x);
        tape.value(y).item()
    };

    let n = x0.len();
    let stride = n.div_ceil(max_coords).max(1);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut probe = x0.clone();
    for i in (0..n).step_by(stride) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    GradCheckReport { name: name.to_string(), max_rel_err: max_rel, checked, tol }
}

const CKPT_MAGIC: &[u8; 4] = b"MNCK";
const CKPT_VERSION: u32 = 1;

/// Writes a named-parameter checkpoint: magic "MNCK", version, JSON header,
/// parameter table (name, shape, little-endian f32 data), CRC32 trailer.
pub fn save_checkpoint(
    path: &Path,
    header: &serde_json::Value,
    params: &[(String, Tensor<f32>)],
) -> Result<(), TensorError> {
    let mut body = Vec::new();
    body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let hdr = serde_json::to_vec(header).expect("header serialization");
    body.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    body.extend_from_slice(&hdr);
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        body.extend_from_slice(nb);
        body.push(t.shape().len() as u8);
        for d in t.shape() {
            body.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&body)?;
    f.write_all(&crc.to_le_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>), TensorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
        return Err(TensorError::BadMagic);
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(TensorError::BadChecksum);
    }
    let mut cur = body;
    let mut take = |n: usize| -> Result<&[u8], TensorError> {
        if cur.len() < n {
            return Err(TensorError::Malformed("unexpected end of data".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(take(hlen)?)
        .map_err(|e| TensorError::Malformed(format!("header: {e}")))?;
    let nparams = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut params = Vec::with_capacity(nparams);
    for _ in 0..nparams {
        let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec())
            .map_err(|_| TensorError::Malformed("non-utf8 parameter name".into()))?;
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(count * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.push((name, Tensor::new(shape, data)));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_matvec_returns_input() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(Tensor::new(vec![2], vec![3.0, -4.0]));
        let y = tape.matvec(w, x);
        assert_eq!(tape.value(y).data(), &[3.0, -4.0]);
    }

    #[test]
    fn conv_ones_counts_overlaps() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 3, 1], vec![1.0; 9]));
        let k = tape.constant(Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1, 1);
        assert_eq!(tape.value(y).shape(), &[3, 3, 1]);
        assert_eq!(
            tape.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_1x1_kernel_is_scalar_map() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.5]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, k, b, 1, 0);
        assert_eq!(tape.value(y).data(), &[2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn deconv_of_single_cell_paints_kernel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1], vec![3.0]));
        let k = tape.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.deconv2d(x, k, b, 2);
        assert_eq!(tape.value(y).shape(), &[2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> = <x, deconv(y)> with the same kernel, stride 2, pad 0.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let xv = rand_tensor(&mut rng, vec![5, 5, 2]);
            let kv = rand_tensor(&mut rng, vec![3, 3, 2, 3]);
            // conv maps 5x5x2 -> 2x2x3 with stride 2.
            let yv = rand_tensor(&mut rng, vec![2, 2, 3]);

            let mut t1: Tape<f64> = Tape::new();
            let x = t1.constant(xv.clone());
            let k = t1.constant(kv.clone());
            let b0 = t1.constant(Tensor::zeros(vec![3]));
            let cx = t1.conv2d(x, k, b0, 2, 0);
            let lhs: f64 = t1.value(cx).data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();

            // The adjoint goes through a kernel transposed in its channel axes.
            let mut kt = Tensor::zeros(vec![3, 3, 3, 2]);
            for ky in 0..3 {
                for kx in 0..3 {
                    for ci in 0..2 {
                        for co in 0..3 {
                            let src = ((ky * 3 + kx) * 2 + ci) * 3 + co;
                            let dst = ((ky * 3 + kx) * 3 + co) * 2 + ci;
                            kt.data_mut()[dst] = kv.data()[src];
                        }
                    }
                }
            }
            let mut t2: Tape<f64> = Tape::new();
            let y = t2.constant(yv);
            let ktn = t2.constant(kt);
            let b1 = t2.constant(Tensor::zeros(vec![2]));
            let dy = t2.deconv2d(y, ktn, b1, 2);
            let rhs: f64 = t2.value(dy).data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn scaled_sigmoid_midpoint_and_range() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, -60.0, 60.0]));
        let y = tape.scaled_sigmoid(x, 99.99, 0.01);
        let v = tape.value(y).data();
        assert!((v[0] - 50.005).abs() < 1e-9);
        assert!((v[1] - 0.01).abs() < 1e-9);
        assert!((v[2] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn scaled_sigmoid_gradient_at_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.scaled_sigmoid(x, 99.99, 0.01);
        tape.backward(y);
        let g = tape.grad(x).unwrap()[0];
        assert!((g - 24.9975).abs() < 1e-9, "lambda/4 expected, got {g}");
    }

    #[test]
    fn softmax_uniform_on_full_grid() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![128, 128]));
        let y = tape.softmax2d(x);
        let v = tape.value(y).data();
        assert!((v[0] - 1.0 / 16384.0).abs() < 1e-12);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_saturates_on_huge_logit() {
        let mut data = vec![0.0; 16];
        data[5] = 1000.0;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 4], data));
        let y = tape.softmax2d(x);
        let v = tape.value(y).data();
        assert!((v[5] - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_tensor(&mut rng, vec![4, 4]);
        let mut x1 = x0.clone();
        for v in x1.data_mut() {
            *v += 7.3;
        }
        let mut t0: Tape<f64> = Tape::new();
        let a = t0.constant(x0);
        let p0 = t0.softmax2d(a);
        let mut t1: Tape<f64> = Tape::new();
        let b = t1.constant(x1);
        let p1 = t1.softmax2d(b);
        for (u, v) in t0.value(p0).data().iter().zip(t1.value(p1).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_constant_channel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![8, 8, 1], vec![2.0; 64]));
        let y = tape.l2_normalize_channels(x);
        for v in tape.value(y).data() {
            assert!((v - 0.125).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_is_idempotent_on_unit_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = rand_tensor(&mut rng, vec![4, 4, 2]);
        for ch in 0..2 {
            let norm: f64 = (0..16).map(|i| x.data()[i * 2 + ch].powi(2)).sum::<f64>().sqrt();
            for i in 0..16 {
                x.data_mut()[i * 2 + ch] /= norm;
            }
        }
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(x.clone());
        let y = tape.l2_normalize_channels(a);
        for (u, v) in tape.value(y).data().iter().zip(x.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_keeps_zero_channel_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![4, 4, 1]));
        let y = tape.l2_normalize_channels(x);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.3, -0.7]));
        let h = tape.constant(Tensor::zeros(vec![2]));
        let c = tape.constant(Tensor::zeros(vec![2]));
        let wx = tape.constant(Tensor::zeros(vec![8, 2]));
        let wh = tape.constant(Tensor::zeros(vec![8, 2]));
        let b = tape.constant(Tensor::zeros(vec![8]));
        let (h2, c2) = lstm_cell(&mut tape, x, h, c, wx, wh, b);
        assert!(tape.value(h2).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(c2).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_carry_cell() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.1, 0.2]));
        let h = tape.constant(Tensor::zeros(vec![2]));
        let c = tape.constant(Tensor::new(vec![2], vec![0.4, -0.6]));
        let wx = tape.constant(Tensor::zeros(vec![8, 2]));
        let wh = tape.constant(Tensor::zeros(vec![8, 2]));
        let mut bias = vec![0.0; 8];
        bias[0] = -10.0; // input gate shut
        bias[1] = -10.0;
        bias[2] = 10.0; // forget gate open
        bias[3] = 10.0;
        let b = tape.constant(Tensor::new(vec![8], bias));
        let (_, c2) = lstm_cell(&mut tape, x, h, c, wx, wh, b);
        let got = tape.value(c2).data();
        assert!((got[0] - 0.4).abs() < 1e-4);
        assert!((got[1] + 0.6).abs() < 1e-4);
    }

    #[test]
    fn rmsprop_first_step_magnitude() {
        let mut params = vec![Tensor::new(vec![1], vec![1.0f32])];
        let grads = vec![Tensor::new(vec![1], vec![1.0f32])];
        let cfg = RmsPropConfig { lr: 0.01, decay: 0.9, eps: 1e-8 };
        let mut opt = OptimizerState::new(cfg, &params);
        opt.step(&mut params, &grads);
        let delta = params[0].data()[0] - 1.0;
        assert!((delta + 0.031623).abs() < 1e-4, "delta {delta}");
    }

    #[test]
    fn rmsprop_zero_grad_is_noop() {
        let mut params = vec![Tensor::new(vec![2], vec![0.5f32, -0.5])];
        let grads = vec![Tensor::zeros(vec![2])];
        let mut opt = OptimizerState::new(RmsPropConfig::default(), &params);
        opt.step(&mut params, &grads);
        assert_eq!(params[0].data(), &[0.5, -0.5]);
    }

    #[test]
    fn rmsprop_step_size_approaches_lr() {
        let mut params = vec![Tensor::new(vec![1], vec![100.0f32])];
        let grads = vec![Tensor::new(vec![1], vec![2.0f32])];
        let cfg = RmsPropConfig { lr: 0.01, decay: 0.9, eps: 1e-8 };
        let mut opt = OptimizerState::new(cfg, &params);
        let mut prev = params[0].data()[0];
        for _ in 0..200 {
            prev = params[0].data()[0];
            opt.step(&mut params, &grads);
        }
        let step = (params[0].data()[0] - prev).abs();
        assert!((step - 0.01).abs() < 1e-4, "step {step}");
    }

    #[test]
    fn grad_check_square_function() {
        let rep = grad_check(
            "square",
            |tape, x| {
                let y = tape.mul(x, x);
                tape.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-3,
            1e-6,
            100,
        );
        assert!(rep.pass(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_flags_kink() {
        // relu at 0: the tape picks the zero branch, central differences see
        // slope 1/2. The checker must report the disagreement.
        let rep = grad_check(
            "relu-at-kink",
            |tape, x| {
                let r = tape.relu(x);
                tape.sum(r)
            },
            &Tensor::scalar(0.0),
            1e-3,
            1e-4,
            100,
        );
        assert!(!rep.pass(), "kink must be reported as a failure");
    }

    #[test]
    fn shared_subexpression_accumulates_like_unrolled_copy() {
        // y = x*x + x*x, built once with a shared node and once duplicated.
        let x0 = Tensor::scalar(1.7);
        let mut t1: Tape<f64> = Tape::new();
        let x = t1.leaf(x0.clone(), true);
        let sq = t1.mul(x, x);
        let y = t1.add(sq, sq);
        t1.backward(y);
        let g_shared = t1.grad(x).unwrap()[0];

        let mut t2: Tape<f64> = Tape::new();
        let x = t2.leaf(x0, true);
        let sq1 = t2.mul(x, x);
        let sq2 = t2.mul(x, x);
        let y = t2.add(sq1, sq2);
        t2.backward(y);
        let g_unrolled = t2.grad(x).unwrap()[0];
        assert!((g_shared - g_unrolled).abs() < 1e-12);
        assert!((g_shared - 4.0 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn needs_grad_gates_propagation() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(Tensor::scalar(5.0), false);
        let y = tape.mul(a, b);
        let z = tape.sum(y);
        tape.backward(z);
        assert_eq!(tape.grad(a).unwrap(), &[5.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = serde_json::json!({"kind": "test", "t_train": 20});
        let params = vec![
            ("layer.w".to_string(), Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0])),
            ("layer.b".to_string(), Tensor::new(vec![3], vec![-0.5f32, 0.0, 0.5])),
        ];
        save_checkpoint(&path, &header, &params).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2, params);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = vec![("w".to_string(), Tensor::new(vec![2], vec![1.0f32, 2.0]))];
        save_checkpoint(&path, &serde_json::json!({}), &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TensorError::BadChecksum)));

        let mut bad_magic = std::fs::read(&path).unwrap();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TensorError::BadMagic)));
    }
}
