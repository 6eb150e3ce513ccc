//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op eagerly (values are computed on the spot) and
//! [`Graph::backward`] walks the tape in reverse from a scalar loss. Only nodes
//! reachable from the loss receive gradients; parameters outside that set are
//! absent from the returned [`Gradients`].

use std::sync::Arc;

use crate::kernels::{col2im, im2col, plane_moments, reflect_index, ConvGeom};
use crate::{Gradients, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Pad { x: Var, pad: usize, mode: PadMode },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    ConcatChannels { parts: Vec<Var> },
    ConcatBatch { parts: Vec<Var> },
    SelectChannels { x: Var, idx: Vec<usize> },
    GatherBatch { x: Var, idx: Vec<usize> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    AffineVec { w: Var, b: Var, input: Vec<T> },
    Reshape { x: Var },
    WeightedL1Rows { pred: Var, target: Arc<Tensor<T>>, mask: Arc<Tensor<T>> },
    BceLogitsRows { logits: Var, target: T },
    WeightedSum { x: Var, coeffs: Vec<T> },
    AddScalars { parts: Vec<Var> },
    Mean { x: Var },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<R>(msg: String) -> Result<R> {
    Err(TensorError::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter leaf (snapshot of the current store value).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { value: Arc::clone(store.get(id)), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Parameter used as a constant: forward identical, no gradient.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant_arc(Arc::clone(store.get(id)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c || kh != kw {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: input {h}x{wd} smaller than kernel {kh}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("conv2d: bias shape {:?} != [{o}]", self.shape(b)));
            }
        }
        let g = ConvGeom { channels: c, in_h: h, in_w: wd, kernel: kh, stride, pad };
        let (oh, ow) = (g.out_h(), g.out_w());
        let (krows, ncols) = (g.col_rows(), g.col_cols());
        let mut out = vec![T::zero(); n * o * ncols];
        let mut cols = vec![T::zero(); krows * ncols];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
                let y = &mut out[bi * o * ncols..(bi + 1) * o * ncols];
                T::gemm(
                    o,
                    krows,
                    ncols,
                    T::one(),
                    (wv, krows as isize, 1),
                    (&cols, ncols as isize, 1),
                    T::zero(),
                    (y, ncols as isize, 1),
                );
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, row) in y.chunks_mut(ncols).enumerate() {
                        let bias = bv[oc];
                        row.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution, weight layout `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (wc, o, kh, kw) = self.value(w).dims4()?;
        if wc != c || kh != kw || out_pad >= stride {
            return shape_err(format!(
                "conv_transpose2d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
        let g = ConvGeom { channels: o, in_h: oh, in_w: ow, kernel: kh, stride, pad };
        debug_assert_eq!((g.out_h(), g.out_w()), (h, wd));
        let krows = g.col_rows();
        let hw = h * wd;
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); krows * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..n {
                // cols = W^T x, W viewed as c x (o*k*k)
                T::gemm(
                    krows,
                    c,
                    hw,
                    T::one(),
                    (wv, 1, krows as isize),
                    (&xv[bi * c * hw..(bi + 1) * c * hw], hw as isize, 1),
                    T::zero(),
                    (&mut cols, hw as isize, 1),
                );
                let y = &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                col2im(&cols, &g, y);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, plane) in y.chunks_mut(oh * ow).enumerate() {
                        let bias = bv[oc];
                        plane.iter_mut().for_each(|v| *v += bias);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    /// Symmetric spatial padding of `pad` pixels on every side.
    pub fn pad(&mut self, x: Var, pad: usize, mode: PadMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ph * pw];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * ph * pw..(p + 1) * ph * pw];
            for y in 0..ph {
                let sy = y as isize - pad as isize;
                for x in 0..pw {
                    let sx = x as isize - pad as isize;
                    d[y * pw + x] = match mode {
                        PadMode::Reflect => s[reflect_index(sy, h) * w + reflect_index(sx, w)],
                        PadMode::Zero => {
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                T::zero()
                            } else {
                                s[sy as usize * w + sx as usize]
                            }
                        }
                    };
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, ph, pw], out)?;
        Ok(self.push(value, Op::Pad { x, pad, mode }, rg))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let s = &src[p * plane..(p + 1) * plane];
            let (mean, var) = plane_moments(s);
            let inv = T::one() / (var + eps).sqrt();
            for (d, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(s) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatChannels { parts: parts.to_vec() }, rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_batch(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatBatch { parts: parts.to_vec() }, rg))
    }

    pub fn select_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).select_channels(idx)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectChannels { x, idx: idx.to_vec() }, rg))
    }

    pub fn gather_batch(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_batch(idx)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherBatch { x, idx: idx.to_vec() }, rg))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2: spatial dims {h}x{w} must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    /// `w · input + b` for a constant input vector; `w: [m, k]`, `b: [m]`.
    pub fn affine_vec(&mut self, w: Var, b: Var, input: &[T]) -> Result<Var> {
        let (m, k) = match self.shape(w) {
            &[m, k] => (m, k),
            s => return shape_err(format!("affine_vec: weight must be rank 2, got {s:?}")),
        };
        if k != input.len() || self.shape(b) != [m] {
            return shape_err(format!(
                "affine_vec: weight {:?}, bias {:?}, input len {}",
                self.shape(w),
                self.shape(b),
                input.len()
            ));
        }
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out: Vec<T> = (0..m)
            .map(|i| {
                let row = &wv[i * k..(i + 1) * k];
                row.iter().zip(input).fold(bv[i], |acc, (&a, &x)| acc + a * x)
            })
            .collect();
        let rg = self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[m], out)?;
        Ok(self.push(value, Op::AffineVec { w, b, input: input.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Per batch item: mean over `C*H*W` of `|pred - target| * mask`. Output `[N]`.
    pub fn weighted_l1_rows(
        &mut self,
        pred: Var,
        target: Arc<Tensor<T>>,
        mask: Arc<Tensor<T>>,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return shape_err(format!(
                "weighted_l1: pred {:?}, target {:?}, mask {:?}",
                p.shape(),
                target.shape(),
                mask.shape()
            ));
        }
        let n = p.shape().first().copied().unwrap_or(0);
        let row = if n == 0 { 0 } else { p.numel() / n };
        let denom = T::from_usize(row.max(1)).unwrap();
        let out: Vec<T> = (0..n)
            .map(|i| {
                let r = i * row..(i + 1) * row;
                p.data()[r.clone()]
                    .iter()
                    .zip(&target.data()[r.clone()])
                    .zip(&mask.data()[r])
                    .map(|((&a, &b), &m)| (a - b).abs() * m)
                    .sum::<T>()
                    / denom
            })
            .collect();
        let rg = self.rg(pred);
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(value, Op::WeightedL1Rows { pred, target, mask }, rg))
    }

    /// Per batch item: mean binary cross-entropy of `sigmoid(logits)` against
    /// a constant label, in the overflow-free logit form. Output `[N]`.
    pub fn bce_logits_rows(&mut self, logits: Var, target: T) -> Result<Var> {
        let z = self.value(logits);
        let n = z.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return shape_err("bce_logits_rows: empty batch".into());
        }
        let row = z.numel() / n;
        let denom = T::from_usize(row).unwrap();
        let out: Vec<T> = z
            .data()
            .chunks(row)
            .map(|r| r.iter().map(|&v| bce_with_logit(v, target)).sum::<T>() / denom)
            .collect();
        let rg = self.rg(logits);
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(value, Op::BceLogitsRows { logits, target }, rg))
    }

    /// `sum_i coeffs[i] * x[i]` over a flat tensor. Output `[1]`.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != coeffs.len() {
            return shape_err(format!(
                "weighted_sum: {} coefficients for {} elements",
                coeffs.len(),
                xv.numel()
            ));
        }
        let s = xv.data().iter().zip(coeffs).map(|(&a, &c)| a * c).sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs: coeffs.to_vec() }, rg))
    }

    /// Sum of single-element tensors.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut s = T::zero();
        for &p in parts {
            let v = self.value(p);
            if v.numel() != 1 {
                return shape_err(format!("add_scalars: operand has shape {:?}", v.shape()));
            }
            s += v.item();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::scalar(s), Op::AddScalars { parts: parts.to_vec() }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel().max(1)).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.map.get_mut(id) {
                    Some(acc) => acc.add_assign(&dy),
                    None => {
                        out.map.insert(*id, dy);
                    }
                },
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv_backward(&mut grads, &dy, *x, *w, *b, *stride, *pad)?
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    self.conv_t_backward(&mut grads, &dy, *x, *w, *b, *stride, *pad)?
                }
                Op::Pad { x, pad, mode } => {
                    if self.rg(*x) {
                        let (n, c, h, w) = self.value(*x).dims4()?;
                        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                        let mut dx = vec![T::zero(); n * c * h * w];
                        for p in 0..n * c {
                            let g = &dy.data()[p * ph * pw..(p + 1) * ph * pw];
                            let d = &mut dx[p * h * w..(p + 1) * h * w];
                            for y in 0..ph {
                                let sy = y as isize - *pad as isize;
                                for xx in 0..pw {
                                    let sx = xx as isize - *pad as isize;
                                    match mode {
                                        PadMode::Reflect => {
                                            d[reflect_index(sy, h) * w + reflect_index(sx, w)] +=
                                                g[y * pw + xx]
                                        }
                                        PadMode::Zero => {
                                            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                                d[sy as usize * w + sx as usize] += g[y * pw + xx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    if self.rg(*x) {
                        let y = node.value.data();
                        let (_, _, h, w) = node.value.dims4()?;
                        let plane = h * w;
                        let cnt = T::from_usize(plane).unwrap();
                        let mut dx = vec![T::zero(); y.len()];
                        for (p, &inv) in inv_std.iter().enumerate() {
                            let r = p * plane..(p + 1) * plane;
                            let g = &dy.data()[r.clone()];
                            let yy = &y[r.clone()];
                            let mean_g = g.iter().copied().sum::<T>() / cnt;
                            let mean_gy = g.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / cnt;
                            for ((d, &gv), &yv) in dx[r].iter_mut().zip(g).zip(yy) {
                                *d = inv * (gv - mean_g - yv * mean_gy);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx)?);
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let dx = dy.zip_map(&node.value, |g, y| if y > T::zero() { g } else { T::zero() })?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.rg(*x) {
                        let s = *slope;
                        let dx = dy.zip_map(&node.value, |g, y| if y > T::zero() { g } else { g * s })?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Tanh { x } => {
                    if self.rg(*x) {
                        let dx = dy.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Scale { x, s } => {
                    if self.rg(*x) {
                        let s = *s;
                        accumulate(&mut grads, *x, dy.map(|g| g * s));
                    }
                }
                Op::ConcatChannels { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        if self.rg(p) {
                            let idx: Vec<usize> = (start..start + pc).collect();
                            accumulate(&mut grads, p, dy.select_channels(&idx)?);
                        }
                        start += pc;
                    }
                }
                Op::ConcatBatch { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let pn = self.shape(p)[0];
                        if self.rg(p) {
                            let idx: Vec<usize> = (start..start + pn).collect();
                            accumulate(&mut grads, p, dy.gather_batch(&idx)?);
                        }
                        start += pn;
                    }
                }
                Op::SelectChannels { x, idx } => {
                    if self.rg(*x) {
                        let (n, c, h, w) = self.value(*x).dims4()?;
                        let plane = h * w;
                        let mut dx = vec![T::zero(); n * c * plane];
                        for b in 0..n {
                            for (j, &ch) in idx.iter().enumerate() {
                                let src = &dy.data()[(b * idx.len() + j) * plane..][..plane];
                                let dst = &mut dx[(b * c + ch) * plane..][..plane];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
                    }
                }
                Op::GatherBatch { x, idx } => {
                    if self.rg(*x) {
                        let shape = self.shape(*x).to_vec();
                        let item = shape[1..].iter().product::<usize>();
                        let mut dx = vec![T::zero(); shape[0] * item];
                        for (j, &b) in idx.iter().enumerate() {
                            let src = &dy.data()[j * item..(j + 1) * item];
                            dx[b * item..(b + 1) * item].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&shape, dx)?);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(self.shape(*x));
                        let d = dx.data_mut();
                        for (&src, &g) in argmax.iter().zip(dy.data()) {
                            d[src] += g;
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Upsample2 { x } => {
                    if self.rg(*x) {
                        let (n, c, h, w) = self.value(*x).dims4()?;
                        let (oh, ow) = (2 * h, 2 * w);
                        let mut dx = vec![T::zero(); n * c * h * w];
                        for p in 0..n * c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dx[p * h * w + (y / 2) * w + xx / 2] += dy.data()[p * oh * ow + y * ow + xx];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
                    }
                }
                Op::AffineVec { w, b, input } => {
                    if self.rg(*w) {
                        let shape = self.shape(*w).to_vec();
                        let dw = Tensor::from_fn(&shape, |i| dy.data()[i / input.len()] * input[i % input.len()]);
                        accumulate(&mut grads, *w, dw);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Reshape { x } => {
                    if self.rg(*x) {
                        let shape = self.shape(*x).to_vec();
                        accumulate(&mut grads, *x, dy.reshape(&shape)?);
                    }
                }
                Op::WeightedL1Rows { pred, target, mask } => {
                    if self.rg(*pred) {
                        let p = self.value(*pred);
                        let n = dy.numel();
                        let row = p.numel() / n.max(1);
                        let denom = T::from_usize(row.max(1)).unwrap();
                        let dx = Tensor::from_fn(p.shape(), |i| {
                            let d = p.data()[i] - target.data()[i];
                            let sign = if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dy.data()[i / row] * sign * mask.data()[i] / denom
                        });
                        accumulate(&mut grads, *pred, dx);
                    }
                }
                Op::BceLogitsRows { logits, target } => {
                    if self.rg(*logits) {
                        let z = self.value(*logits);
                        let row = z.numel() / dy.numel();
                        let denom = T::from_usize(row).unwrap();
                        let t = *target;
                        let dx = Tensor::from_fn(z.shape(), |i| {
                            dy.data()[i / row] * (sigmoid(z.data()[i]) - t) / denom
                        });
                        accumulate(&mut grads, *logits, dx);
                    }
                }
                Op::WeightedSum { x, coeffs } => {
                    if self.rg(*x) {
                        let g = dy.item();
                        let shape = self.shape(*x).to_vec();
                        accumulate(&mut grads, *x, Tensor::from_fn(&shape, |i| g * coeffs[i]));
                    }
                }
                Op::AddScalars { parts } => {
                    for &p in parts {
                        if self.rg(p) {
                            accumulate(&mut grads, p, dy.clone());
                        }
                    }
                }
                Op::Mean { x } => {
                    if self.rg(*x) {
                        let shape = self.shape(*x).to_vec();
                        let n = T::from_usize(self.value(*x).numel().max(1)).unwrap();
                        let g = dy.item() / n;
                        accumulate(&mut grads, *x, Tensor::full(&shape, g));
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        dy: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, _, k, _) = self.value(w).dims4()?;
        let g = ConvGeom { channels: c, in_h: h, in_w: wd, kernel: k, stride, pad };
        let (krows, ncols) = (g.col_rows(), g.col_cols());
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = need_w.then(|| vec![T::zero(); o * krows]);
        let mut dx = need_x.then(|| vec![T::zero(); n * c * h * wd]);
        let mut cols = vec![T::zero(); krows * ncols];
        for bi in 0..n {
            let g_out = &dy.data()[bi * o * ncols..(bi + 1) * o * ncols];
            if let Some(dw) = dw.as_mut() {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
                T::gemm(
                    o,
                    ncols,
                    krows,
                    T::one(),
                    (g_out, ncols as isize, 1),
                    (&cols, 1, ncols as isize),
                    T::one(),
                    (dw, krows as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    krows,
                    o,
                    ncols,
                    T::one(),
                    (wv, 1, krows as isize),
                    (g_out, ncols as isize, 1),
                    T::zero(),
                    (&mut cols, ncols as isize, 1),
                );
                col2im(&cols, &g, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
            }
        }
        if let Some(dw) = dw {
            accumulate(grads, w, Tensor::from_vec(self.shape(w), dw)?);
        }
        if let Some(dx) = dx {
            accumulate(grads, x, Tensor::from_vec(&[n, c, h, wd], dx)?);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            accumulate(grads, b, bias_grad(dy, o)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        dy: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (_, o, k, _) = self.value(w).dims4()?;
        let (_, _, oh, ow) = dy.dims4()?;
        let g = ConvGeom { channels: o, in_h: oh, in_w: ow, kernel: k, stride, pad };
        let krows = g.col_rows();
        let hw = h * wd;
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = need_w.then(|| vec![T::zero(); c * krows]);
        let mut dx = need_x.then(|| vec![T::zero(); n * c * hw]);
        let mut cols = vec![T::zero(); krows * hw];
        if need_x || need_w {
            for bi in 0..n {
                im2col(&dy.data()[bi * o * oh * ow..(bi + 1) * o * oh * ow], &g, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        c,
                        krows,
                        hw,
                        T::one(),
                        (wv, krows as isize, 1),
                        (&cols, hw as isize, 1),
                        T::zero(),
                        (&mut dx[bi * c * hw..(bi + 1) * c * hw], hw as isize, 1),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    T::gemm(
                        c,
                        hw,
                        krows,
                        T::one(),
                        (&xv[bi * c * hw..(bi + 1) * c * hw], hw as isize, 1),
                        (&cols, 1, hw as isize),
                        T::one(),
                        (dw, krows as isize, 1),
                    );
                }
            }
        }
        if let Some(dw) = dw {
            accumulate(grads, w, Tensor::from_vec(self.shape(w), dw)?);
        }
        if let Some(dx) = dx {
            accumulate(grads, x, Tensor::from_vec(&[n, c, h, wd], dx)?);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            accumulate(grads, b, bias_grad(dy, o)?);
        }
        Ok(())
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>, o: usize) -> Result<Tensor<T>> {
    let (n, _, h, w) = dy.dims4()?;
    let plane = h * w;
    let mut db = vec![T::zero(); o];
    for bi in 0..n {
        for (oc, d) in db.iter_mut().enumerate() {
            *d += dy.data()[(bi * o + oc) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[o], db)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `BCE(sigmoid(z), y) = max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
