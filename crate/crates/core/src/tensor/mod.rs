//! Reverse-mode autodiff on a flat operation tape.
//!
//! A [`Tape`] owns every tensor it creates; ops append a node holding the
//! forward result plus whatever context the adjoint needs, and
//! [`Tape::backward`] walks the nodes once in reverse creation order.
//! Gradients accumulate: running backward twice doubles them, and tensors
//! not on any path to the loss simply never receive a buffer.
//!
//! There is no implicit broadcasting anywhere; every shape rule is explicit
//! and violations are errors, not panics.

mod kernels;

use crate::error::{Error, Result};
use crate::par;

pub(crate) use kernels::ConvDims;

/// Storage dtype tag, used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar type the engine is generic over. f32 is the training default;
/// f64 backs gradient checks and the exactness tests.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// Fused `self * a + b`. The hot kernels lean on this mapping to an FMA
    /// instruction; on targets without one it falls back to the (slow but
    /// correct) libm softfloat.
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
}

/// Handle to a tensor on its tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<T: Element> {
    Leaf,
    Add(TensorId, TensorId),
    AddScalar(TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    Relu(TensorId),
    Abs(TensorId),
    Sum(TensorId),
    SumAxis { x: TensorId, axis: usize },
    Reshape(TensorId),
    Pad2d { x: TensorId, pad: usize },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, pad: usize },
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    MaxPool2x2 { x: TensorId, argmax: Vec<u32> },
    GlobalAvgPool(TensorId),
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<T>, inv_std: Vec<T>, training: bool },
}

struct Node<T: Element> {
    data: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// With gradients disabled, new ops record no adjoint context and
    /// backward cannot reach them. Forward values are unaffected.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// `None` until backward has routed a contribution through this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Drops every gradient buffer, ending any accumulation in progress.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || numel_of(shape) == 0 {
            return Err(Error::shape("leaf", format!("empty shape {shape:?}")));
        }
        if data.len() != numel_of(shape) {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        let needs = requires_grad && self.grad_enabled;
        Ok(self.push(data, shape.to_vec(), Op::Leaf, needs))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> TensorId {
        let needs = needs_grad && self.grad_enabled;
        // Context is only kept where backward can reach; eval-mode graphs
        // stay cheap.
        let op = if needs { op } else { Op::Leaf };
        self.nodes.push(Node { data, shape, grad: None, needs_grad: needs, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let data = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::AddScalar(x), self.needs(&[x])))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let data = self.data(x).iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::Scale(x, c), self.needs(&[x])))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::Relu(x), self.needs(&[x])))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::Abs(x), self.needs(&[x])))
    }

    /// Sum of every element, in row-major order, yielding shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = T::ZERO;
        for &v in self.data(x) {
            acc += v;
        }
        Ok(self.push(vec![acc], vec![1], Op::Sum(x), self.needs(&[x])))
    }

    /// Sums along `axis`, removing it. Each output element accumulates in
    /// ascending index order along the axis.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        if shape.len() == 1 {
            return self.sum(x);
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * inner];
        let data = self.data(x);
        for o in 0..outer {
            for a in 0..alen {
                let base = (o * alen + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&data[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(out, out_shape, Op::SumAxis { x, axis }, self.needs(&[x])))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        if numel_of(new_shape) != self.numel(x) || new_shape.is_empty() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {new_shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(data, new_shape.to_vec(), Op::Reshape(x), self.needs(&[x])))
    }

    /// Zero-pads the two spatial axes of an `[n, c, h, w]` tensor.
    pub fn pad2d(&mut self, x: TensorId, pad: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("pad2d", format!("expected rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let data = self.data(x);
        for nc in 0..n * c {
            for y in 0..h {
                let src = &data[(nc * h + y) * w..(nc * h + y + 1) * w];
                let dst_base = (nc * oh + y + pad) * ow + pad;
                out[dst_base..dst_base + w].copy_from_slice(src);
            }
        }
        Ok(self.push(out, vec![n, c, oh, ow], Op::Pad2d { x, pad }, self.needs(&[x])))
    }

    /// Batched cross-correlation. `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`,
    /// optional `b: [cout]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let d = self.conv_dims(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), d.cout),
                ));
            }
        }
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &d);
        let shape = vec![d.n, d.cout, d.oh, d.ow];
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs(&ids);
        Ok(self.push(out, shape, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    fn conv_dims(&self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<ConvDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}; both must be rank 4"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (h, w_) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * pad < kh || w_ + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w_ + 2 * pad),
            ));
        }
        Ok(ConvDims {
            n: xs[0],
            cin: xs[1],
            h,
            w: w_,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w_ + 2 * pad - kw) / stride + 1,
        })
    }

    /// Fully connected layer. `x: [n, d]`, `w: [o, d]`, optional `b: [o]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let o = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {o} outputs", self.shape(b)),
                ));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![T::ZERO; n * o];
        for i in 0..n {
            let xrow = &xd[i * d..(i + 1) * d];
            for j in 0..o {
                let wrow = &wd[j * d..(j + 1) * d];
                let mut acc = T::ZERO;
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out[i * o + j] = acc;
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(o) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let needs = self.needs(&ids);
        Ok(self.push(out, vec![n, o], Op::Linear { x, w, b }, needs))
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims; ties pick
    /// the first element in scan order.
    pub fn max_pool2x2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("max_pool2x2", format!("expected rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2x2",
                format!("spatial dims {h}x{w} must be even and at least 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = self.data(x);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let plane = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![n, c, oh, ow], Op::MaxPool2x2 { x, argmax }, needs))
    }

    /// Spatial mean per `[n, c]`, accumulated in row-major order then divided
    /// by the pixel count.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let m = T::from_f64(hw as f64);
        let data = self.data(x);
        let mut out = vec![T::ZERO; n * c];
        for (nc, o) in out.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &data[nc * hw..(nc + 1) * hw] {
                acc += v;
            }
            *o = acc / m;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![n, c], Op::GlobalAvgPool(x), needs))
    }

    /// Batch normalization over `[n, c, h, w]` with per-channel affine
    /// parameters. In training mode the running stats are updated in place
    /// with factor `momentum` and the batch must contain at least two values
    /// per channel; in eval mode the running stats are read only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: T,
        eps: T,
        training: bool,
    ) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("expected rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        for (name, len) in [
            ("gamma", self.numel(gamma)),
            ("beta", self.numel(beta)),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{name} has {len} entries for {c} channels"),
                ));
            }
        }
        let m = n * hw;
        let (mean, inv_std) = if training {
            if m < 2 {
                return Err(Error::invalid(
                    "batch_norm2d",
                    "training mode needs at least 2 values per channel",
                ));
            }
            let (mean, var) = kernels::bn_batch_stats(self.data(x), n, c, hw);
            let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            let unbias = T::from_f64(m as f64 / (m as f64 - 1.0));
            let keep = T::ONE - momentum;
            for ci in 0..c {
                running_mean[ci] = keep * running_mean[ci] + momentum * mean[ci];
                running_var[ci] = keep * running_var[ci] + momentum * var[ci] * unbias;
            }
            (mean, inv_std)
        } else {
            let mean = running_mean.to_vec();
            let inv_std = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            (mean, inv_std)
        };
        let out = kernels::bn_apply(self.data(x), n, c, hw, &mean, &inv_std, self.data(gamma), self.data(beta));
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            s.to_vec(),
            Op::BatchNorm { x, gamma, beta, mean, inv_std, training },
            needs,
        ))
    }

    /// Accumulates `d loss / d node` into every reachable tensor that
    /// requires gradients. `loss` must be a scalar (one element).
    ///
    /// Propagation runs through buffers local to this call; only the final
    /// per-node totals are merged into the persistent gradients, which is
    /// what makes repeated backward calls sum cleanly.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::invalid(
                "backward",
                "loss does not require gradients (created with grad disabled?)",
            ));
        }
        let mut locals: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        locals[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = locals[i].take() else { continue };
            self.apply_adjoint(i, &g, &mut locals);
            locals[i] = Some(g);
        }
        for (i, buf) in locals.into_iter().enumerate() {
            let Some(buf) = buf else { continue };
            match &mut self.nodes[i].grad {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(buf) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(buf),
            }
        }
        Ok(())
    }

    /// Adds `f`'s contribution to the local gradient buffer of `id`, if that
    /// tensor participates in gradients at all.
    fn acc<F>(&self, locals: &mut [Option<Vec<T>>], id: TensorId, f: F)
    where
        F: FnOnce(&mut [T]),
    {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let buf = locals[id.0].get_or_insert_with(|| vec![T::ZERO; len]);
        f(buf);
    }

    fn apply_adjoint(&self, i: usize, g: &[T], locals: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for id in [a, b] {
                    self.acc(locals, id, |buf| {
                        for (o, &v) in buf.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                self.acc(locals, x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let bd = &self.nodes[b.0].data;
                self.acc(locals, a, |buf| {
                    for ((o, &v), &bv) in buf.iter_mut().zip(g).zip(bd) {
                        *o += v * bv;
                    }
                });
                let ad = &self.nodes[a.0].data;
                self.acc(locals, b, |buf| {
                    for ((o, &v), &av) in buf.iter_mut().zip(g).zip(ad) {
                        *o += v * av;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.acc(locals, x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            &Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                self.acc(locals, x, |buf| {
                    for ((o, &v), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > T::ZERO {
                            *o += v;
                        }
                    }
                });
            }
            &Op::Abs(x) => {
                let xd = &self.nodes[x.0].data;
                self.acc(locals, x, |buf| {
                    for ((o, &v), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > T::ZERO {
                            *o += v;
                        } else if xv < T::ZERO {
                            *o += -v;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                self.acc(locals, x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            &Op::SumAxis { x, axis } => {
                let shape = &self.nodes[x.0].shape;
                let outer: usize = shape[..axis].iter().product();
                let alen = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.acc(locals, x, |buf| {
                    for o in 0..outer {
                        let gseg = &g[o * inner..(o + 1) * inner];
                        for a in 0..alen {
                            let base = (o * alen + a) * inner;
                            for (ov, &v) in buf[base..base + inner].iter_mut().zip(gseg) {
                                *ov += v;
                            }
                        }
                    }
                });
            }
            &Op::Pad2d { x, pad } => {
                let s = &self.nodes[x.0].shape;
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                self.acc(locals, x, |buf| {
                    for nc in 0..n * c {
                        for y in 0..h {
                            let src_base = (nc * oh + y + pad) * ow + pad;
                            let dst = &mut buf[(nc * h + y) * w..(nc * h + y + 1) * w];
                            for (o, &v) in dst.iter_mut().zip(&g[src_base..src_base + w]) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let d = self.conv_dims(x, w, stride, pad).expect("validated at forward");
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                let [gx, gw, gb] = take_three(locals, [
                    self.nodes[x.0].needs_grad.then_some((x.0, xd.len())),
                    self.nodes[w.0].needs_grad.then_some((w.0, wd.len())),
                    b.and_then(|b| {
                        self.nodes[b.0].needs_grad.then_some((b.0, self.nodes[b.0].data.len()))
                    }),
                ]);
                let mut gx = gx;
                let mut gw = gw;
                let mut gb = gb;
                kernels::conv2d_backward(
                    xd,
                    wd,
                    g,
                    &d,
                    gx.as_mut().map(|(_, v)| v.as_mut_slice()),
                    gw.as_mut().map(|(_, v)| v.as_mut_slice()),
                    gb.as_mut().map(|(_, v)| v.as_mut_slice()),
                );
                put_three(locals, [gx, gw, gb]);
            }
            &Op::Linear { x, w, b } => {
                let (n, d) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1])
                };
                let o = self.nodes[w.0].shape[0];
                let wd = &self.nodes[w.0].data;
                self.acc(locals, x, |buf| {
                    for i in 0..n {
                        let grow = &g[i * o..(i + 1) * o];
                        let xrow = &mut buf[i * d..(i + 1) * d];
                        for (j, &gv) in grow.iter().enumerate() {
                            let wrow = &wd[j * d..(j + 1) * d];
                            for (ov, &wv) in xrow.iter_mut().zip(wrow) {
                                *ov += gv * wv;
                            }
                        }
                    }
                });
                let xd = &self.nodes[x.0].data;
                self.acc(locals, w, |buf| {
                    for i in 0..n {
                        let grow = &g[i * o..(i + 1) * o];
                        let xrow = &xd[i * d..(i + 1) * d];
                        for (j, &gv) in grow.iter().enumerate() {
                            let wrow = &mut buf[j * d..(j + 1) * d];
                            for (ov, &xv) in wrow.iter_mut().zip(xrow) {
                                *ov += gv * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(locals, b, |buf| {
                        for grow in g.chunks_exact(o) {
                            for (ov, &gv) in buf.iter_mut().zip(grow) {
                                *ov += gv;
                            }
                        }
                    });
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                self.acc(locals, *x, |buf| {
                    for (gv, &src) in g.iter().zip(argmax) {
                        buf[src as usize] += *gv;
                    }
                });
            }
            &Op::GlobalAvgPool(x) => {
                let s = &self.nodes[x.0].shape;
                let hw = s[2] * s[3];
                let m = T::from_f64(hw as f64);
                self.acc(locals, x, |buf| {
                    for (nc, &gv) in g.iter().enumerate() {
                        let share = gv / m;
                        for o in buf[nc * hw..(nc + 1) * hw].iter_mut() {
                            *o += share;
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
                self.batch_norm_adjoint(i, g, locals, *x, *gamma, *beta, mean, inv_std, *training);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_adjoint(
        &self,
        node: usize,
        g: &[T],
        locals: &mut [Option<Vec<T>>],
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[T],
        inv_std: &[T],
        training: bool,
    ) {
        let s = &self.nodes[node].shape;
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = (n * hw) as f64;
        // Per-channel reductions in f64, each accumulated over ascending
        // (sample, pixel) order.
        let xd = &self.nodes[x.0].data;
        let sums: Vec<(f64, f64)> = par::map_ordered(c, |ci| {
            let mu = mean[ci];
            let istd = inv_std[ci];
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for i in 0..n {
                let base = (i * c + ci) * hw;
                for l in 0..hw {
                    let gv = g[base + l].to_f64();
                    let xhat = ((xd[base + l] - mu) * istd).to_f64();
                    s1 += gv;
                    s2 += gv * xhat;
                }
            }
            (s1, s2)
        });

        self.acc(locals, gamma, |buf| {
            for (o, &(_, s2)) in buf.iter_mut().zip(&sums) {
                *o += T::from_f64(s2);
            }
        });
        self.acc(locals, beta, |buf| {
            for (o, &(s1, _)) in buf.iter_mut().zip(&sums) {
                *o += T::from_f64(s1);
            }
        });

        let gammad = &self.nodes[gamma.0].data;
        let coeff: Vec<(T, T, T)> = (0..c)
            .map(|ci| {
                let a = gammad[ci] * inv_std[ci];
                if training {
                    (a, T::from_f64(sums[ci].0 / m), T::from_f64(sums[ci].1 / m))
                } else {
                    (a, T::ZERO, T::ZERO)
                }
            })
            .collect();
        self.acc(locals, x, |buf| {
            par::for_each_chunk(buf, c * hw, |i, gx_n| {
                for ci in 0..c {
                    let (a, gmean, gproj) = coeff[ci];
                    let mu = mean[ci];
                    let istd = inv_std[ci];
                    let base = (i * c + ci) * hw;
                    let dst = &mut gx_n[ci * hw..(ci + 1) * hw];
                    for (l, o) in dst.iter_mut().enumerate() {
                        let gv = g[base + l];
                        let xhat = (xd[base + l] - mu) * istd;
                        *o += a * (gv - gmean - xhat * gproj);
                    }
                }
            });
        });
    }
}

/// Pulls up to three local gradient buffers out by node index so a kernel
/// can fill them simultaneously. If two slots name the same node (an op fed
/// the same tensor twice), the second taker starts from zeros and
/// [`put_three`] merges the contributions back together.
fn take_three<T>(
    locals: &mut [Option<Vec<T>>],
    wants: [Option<(usize, usize)>; 3],
) -> [Option<(usize, Vec<T>)>; 3]
where
    T: Element,
{
    wants.map(|want| {
        want.map(|(idx, len)| {
            let buf = locals[idx].take().unwrap_or_else(|| vec![T::ZERO; len]);
            (idx, buf)
        })
    })
}

fn put_three<T: Element>(locals: &mut [Option<Vec<T>>], bufs: [Option<(usize, Vec<T>)>; 3]) {
    for buf in bufs {
        if let Some((idx, buf)) = buf {
            match &mut locals[idx] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(buf) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_scale_forward_values() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let b = t.leaf(vec![10.0, 20.0], &[2], true).unwrap();
        let s = t.add(a, b).unwrap();
        let out = t.scale(s, 0.5).unwrap();
        assert_eq!(t.data(out), &[5.5, 11.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let b = t.leaf(vec![1.0, 2.0, 3.0], &[3], false).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.reshape(a, &[4]).is_err());
    }

    #[test]
    fn backward_accumulates_over_repeated_calls() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![3.0], &[1], true).unwrap();
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn two_consumers_sum_their_contributions() {
        // loss = sum(x*x) + sum(x) has gradient 2x + 1.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.5, -2.0, 0.25], &[3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s1 = t.sum(sq).unwrap();
        let s2 = t.sum(x).unwrap();
        let loss = t.add(s1, s2).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for (i, &xv) in [1.5, -2.0, 0.25].iter().enumerate() {
            assert!((g[i] - (2.0 * xv + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn off_path_tensors_have_no_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0], &[1], true).unwrap();
        let unused = t.leaf(vec![5.0], &[1], true).unwrap();
        let loss = t.mul(x, x).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(unused).is_none());
        assert!(t.grad(x).is_some());
    }

    #[test]
    fn grad_disabled_blocks_backward() {
        let mut t = Tape::<f64>::new();
        t.set_grad_enabled(false);
        let x = t.leaf(vec![2.0], &[1], true).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.data(y), &[4.0]);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![-1.0, 0.0, 2.0], &[3], true).unwrap();
        let r = t.relu(x).unwrap();
        let loss = t.sum(r).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(t.data(r), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn abs_sign_convention() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![-3.0, 0.0, 4.0], &[3], true).unwrap();
        let a = t.abs(x).unwrap();
        let loss = t.sum(a).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.data(a), &[3.0, 0.0, 4.0]);
        assert_eq!(t.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_axis_removes_axis_in_order() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0], &[2, 3], true).unwrap();
        let s = t.sum_axis(x, 1).unwrap();
        assert_eq!(t.shape(s), &[2]);
        assert_eq!(t.data(s), &[6.0, 60.0]);
        let s0 = t.sum_axis(x, 0).unwrap();
        assert_eq!(t.data(s0), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let mut t = Tape::<f64>::new();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0], &[1, 2, 2, 2], true)
            .unwrap();
        let p = t.max_pool2x2(x).unwrap();
        assert_eq!(t.data(p), &[4.0, 4.0]);
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        // Second channel ties everywhere; first in scan order wins.
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_matches_sum_over_count() {
        let mut t = Tape::<f64>::new();
        let vals: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let x = t.leaf(vals.clone(), &[1, 2, 2, 3], false).unwrap();
        let p = t.global_avg_pool(x).unwrap();
        for c in 0..2 {
            let mut acc = 0.0;
            for &v in &vals[c * 6..(c + 1) * 6] {
                acc += v;
            }
            assert_eq!(t.data(p)[c], acc / 6.0);
        }
    }

    #[test]
    fn conv_identity_kernel_is_exact() {
        let mut t = Tape::<f64>::new();
        let vals: Vec<f64> = (0..18).map(|i| (i as f64) * 1.7 - 3.0).collect();
        let x = t.leaf(vals.clone(), &[1, 2, 3, 3], false).unwrap();
        // 2-in/2-out 1x1 kernel that routes channel i to output i unchanged.
        let w = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1], false).unwrap();
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.data(y), &vals[..]);
    }

    #[test]
    fn pad_then_crop_roundtrips_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2], true).unwrap();
        let p = t.pad2d(x, 2).unwrap();
        assert_eq!(t.shape(p), &[1, 1, 6, 6]);
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut t = Tape::<f64>::new();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 1, 2, 2], true)
            .unwrap();
        let gamma = t.leaf(vec![1.0], &[1], true).unwrap();
        let beta = t.leaf(vec![0.0], &[1], true).unwrap();
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = t
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-5, true)
            .unwrap();
        let out = t.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 8.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // Running stats move toward the batch stats.
        assert!((rm[0] - 0.45).abs() < 1e-12);
        assert!(rv[0] > 1.0);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_only() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2.0, 4.0], &[2, 1, 1, 1], false).unwrap();
        let gamma = t.leaf(vec![3.0], &[1], false).unwrap();
        let beta = t.leaf(vec![1.0], &[1], false).unwrap();
        let mut rm = vec![2.0];
        let mut rv = vec![4.0];
        let y = t
            .batch_norm2d(x, gamma, beta, &mut rm, &mut rv, 0.1, 0.0, false)
            .unwrap();
        assert!((t.data(y)[0] - 1.0).abs() < 1e-12);
        assert!((t.data(y)[1] - 4.0).abs() < 1e-12);
        assert_eq!((rm[0], rv[0]), (2.0, 4.0));
    }
}
