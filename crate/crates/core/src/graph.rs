//! Define-by-run reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation of one forward pass as a node in a
//! flat arena; node ids are topologically ordered by construction, so the
//! backward sweep is a single reverse walk. Gradients are allocated only
//! for nodes that can reach a grad-requiring leaf — frozen parameters and
//! plain inputs never get a gradient buffer.
//!
//! All reductions run in a fixed sequential order (GEMM goes through
//! `matrixmultiply`, which blocks deterministically), so forward and
//! backward results are bitwise reproducible for a given seed and config.

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, conv_out_extent, gemm, gemm_strided, im2col};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Forward mode: `Train` uses batch statistics in batch norm (and records
/// them for running-stat updates), `Eval` uses the provided running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    /// x:[B,K,Din] w:[Dout,Din] b:[Dout] -> [B,K,Dout]
    Linear { x: Var, w: Var, b: Var },
    /// a:[m,k] * b:[k,n]
    Matmul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    /// saved: (mean, rstd) per normalized row
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: Vec<(T, T)> },
    /// x:[B,C,H,W] w:[O,C,k,k] b:[O]
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    /// mean/var are the statistics used for normalization (batch stats in
    /// train mode, running stats in eval mode)
    BatchNorm2d { x: Var, gamma: Var, beta: Var, eps: T, mean: Vec<T>, var: Vec<T>, train: bool },
    Relu { x: Var },
    Gelu { x: Var },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    /// [B,K,D] -> [B,D]
    MeanPoolTokens { x: Var },
    Add { a: Var, b: Var },
    /// x:[B,K,D] + bias:[K,D], broadcast over batch
    AddBroadcast { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    /// x * s with s a [1]-shaped parameter
    ScaleByScalar { x: Var, s: Var },
    Sum { x: Var },
    /// q:[B,Kq,D] k:[B,Kv,D] -> [B,h,Kq,Kv] scaled by 1/sqrt(D/h)
    AttnScores { q: Var, k: Var, heads: usize },
    /// p:[B,h,Kq,Kv] v:[B,Kv,D] -> [B,Kq,D]
    AttnContext { p: Var, v: Var, heads: usize },
    /// [B,C,H,W] -> [B,H*W,C]
    MapToTokens { x: Var },
    ConcatTokens { parts: Vec<Var> },
    /// mean over batch of -log softmax(logits)[label]; saved probs [B,C]
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    TakeScalar { x: Var, index: usize },
    /// columns [start, start+len) of the last axis
    SliceLast { x: Var, start: usize, len: usize },
    Reshape { x: Var },
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    mode: Mode,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), mode }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("var {} is not in this graph", v.0)));
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a leaf tensor. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if one
    /// was produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Force gradient retention for an intermediate node (used by the
    /// saliency export). Must be called before dependent ops are recorded.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
    }

    /// Batch statistics computed by a train-mode batch-norm node:
    /// `(mean, biased_var)` per channel.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm2d { mean, var, train: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::ZERO,
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Matmul { a, b }))
    }

    /// Token-wise affine map: x:[B,K,Din], w:[Dout,Din], b:[Dout].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[2] || sb != [sw[0]] {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                sx,
                sw,
                self.shape(b)
            )));
        }
        let (rows, din, dout) = (sx[0] * sx[1], sx[2], sw[0]);
        let mut out = Tensor::zeros(&[sx[0], sx[1], dout]);
        // out = x * w^T
        unsafe {
            gemm_strided(
                rows,
                din,
                dout,
                T::ONE,
                self.value(x).data().as_ptr(),
                din as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                din as isize,
                T::ZERO,
                out.data_mut().as_mut_ptr(),
                dout as isize,
                1,
            );
        }
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax: axis {} out of range for rank {}",
                axis,
                shape.len()
            )));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut maxv = data[base];
                for j in 1..axis_len {
                    maxv = maxv.maxs(data[base + j * inner]);
                }
                let mut sum = T::ZERO;
                for j in 0..axis_len {
                    let e = (data[base + j * inner] - maxv).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm: rank 0".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?} needs gamma/beta of [{}], got {:?}/{:?}",
                shape,
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / d;
        let mut out = Tensor::zeros(&shape);
        let mut saved = Vec::with_capacity(rows);
        let inv_d = T::ONE / T::from_f64(d as f64);
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let od = out.data_mut();
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let mut mean = T::ZERO;
                for &v in xr {
                    mean += v;
                }
                mean = mean * inv_d;
                let mut var = T::ZERO;
                for &v in xr {
                    let c = v - mean;
                    var += c * c;
                }
                var = var * inv_d;
                let rstd = T::ONE / (var + eps).sqrt();
                saved.push((mean, rstd));
                let or = &mut od[r * d..(r + 1) * d];
                for j in 0..d {
                    or[j] = (xr[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, saved }))
    }

    /// Cross-correlation with bias, floor output extents.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::Shape(format!("conv2d: x {:?}, w {:?}", sx, sw)));
        }
        if sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d: input channels {} != kernel channels {}",
                sx[1], sw[1]
            )));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::Shape(format!(
                "conv2d: bias {:?} does not match {} output channels",
                self.shape(b),
                sw[0]
            )));
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let oh = conv_out_extent(h, k, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {} exceeds padded height {}", k, h + 2 * padding)))?;
        let ow = conv_out_extent(wd, k, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {} exceeds padded width {}", k, wd + 2 * padding)))?;
        let ckk = c * k * k;
        let per = oh * ow;
        let bp = bsz * per;
        let mut out = Tensor::zeros(&[bsz, o, oh, ow]);
        {
            // One batched GEMM: cols [Ckk, B*P], result [O, B*P], then a
            // permutation pass into the [B, O, P] output with fused bias.
            let xd = self.value(x).data();
            let wdn = self.value(w).data();
            let bias = self.value(b).data();
            let mut cols = vec![T::ZERO; ckk * bp];
            for bi in 0..bsz {
                im2col(
                    &xd[bi * c * h * wd..(bi + 1) * c * h * wd],
                    c, h, wd, k, stride, padding, oh, ow,
                    &mut cols, bp, bi * per,
                );
            }
            let mut flat = vec![T::ZERO; o * bp];
            gemm(o, ckk, bp, T::ONE, wdn, false, &cols, false, T::ZERO, &mut flat);
            let od = out.data_mut();
            for bi in 0..bsz {
                for oc in 0..o {
                    let src = &flat[oc * bp + bi * per..oc * bp + (bi + 1) * per];
                    let dst = &mut od[(bi * o + oc) * per..(bi * o + oc + 1) * per];
                    let bv = bias[oc];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Batch norm over [B,C,H,W]. In train mode the batch statistics are
    /// used and recorded (fetch them with [`Graph::bn_batch_stats`]); in
    /// eval mode `running_mean`/`running_var` are used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("batch_norm2d: expected rank 4, got {:?}", sx)));
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!("batch_norm2d: channel mismatch for {:?}", sx)));
        }
        let plane = h * w;
        let n = bsz * plane;
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            let xd = self.value(x).data();
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            let inv_n = T::ONE / T::from_f64(n as f64);
            for ci in 0..c {
                let mut acc = T::ZERO;
                for bi in 0..bsz {
                    let base = (bi * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        acc += v;
                    }
                }
                let m = acc * inv_n;
                let mut acc2 = T::ZERO;
                for bi in 0..bsz {
                    let base = (bi * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        let d = v - m;
                        acc2 += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = acc2 * inv_n;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let mut out = Tensor::zeros(&sx);
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let rstd = T::ONE / (var[ci] + eps).sqrt();
                    let scale = g[ci] * rstd;
                    let shift = bt[ci] - mean[ci] * scale;
                    for (o, &v) in od[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, rg, Op::BatchNorm2d { x, gamma, beta, eps, mean, var, train }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Relu { x }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let x3 = *v * *v * *v;
            let u = c * (*v + a * x3);
            *v = half * *v * (T::ONE + u.tanh());
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Gelu { x }))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d: expected rank 4, got {:?}", sx)));
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = conv_out_extent(h, kernel, stride, padding)
            .ok_or_else(|| Error::Shape(format!("max_pool2d: window {} exceeds input {}", kernel, h)))?;
        let ow = conv_out_extent(w, kernel, stride, padding)
            .ok_or_else(|| Error::Shape(format!("max_pool2d: window {} exceeds input {}", kernel, w)))?;
        let mut out = Tensor::zeros(&[bsz, c, oh, ow]);
        let mut argmax = vec![0u32; bsz * c * oh * ow];
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let mut oi = 0usize;
            for bi in 0..bsz {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best: Option<(T, usize)> = None;
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w + ix as usize;
                                    let v = xd[idx];
                                    // Ties keep the first (scan-order) maximum.
                                    if best.map_or(true, |(bv, _)| v > bv) {
                                        best = Some((v, idx));
                                    }
                                }
                            }
                            let (v, idx) = best.ok_or_else(|| {
                                Error::Shape("max_pool2d: empty pooling window".into())
                            })?;
                            od[oi] = v;
                            argmax[oi] = idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Mean over the token axis: [B,K,D] -> [B,D].
    pub fn mean_pool_tokens(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Shape(format!("mean_pool_tokens: expected rank 3, got {:?}", sx)));
        }
        let (bsz, k, d) = (sx[0], sx[1], sx[2]);
        let inv_k = T::ONE / T::from_f64(k as f64);
        let mut out = Tensor::zeros(&[bsz, d]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                let orow = &mut od[bi * d..(bi + 1) * d];
                for ki in 0..k {
                    let xrow = &xd[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                    for (o, &v) in orow.iter_mut().zip(xrow) {
                        *o += v;
                    }
                }
                for o in orow {
                    *o = *o * inv_k;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MeanPoolTokens { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// x:[B,K,D] + bias:[K,D], broadcast over the batch axis.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sb != sx[1..] {
            return Err(Error::Shape(format!("add_broadcast: x {:?}, bias {:?}", sx, sb)));
        }
        let per = sb.iter().product::<usize>();
        let mut out = self.value(x).clone();
        {
            let bd = self.nodes[bias.0].value.data();
            for chunk in out.data_mut().chunks_exact_mut(per) {
                for (o, &v) in chunk.iter_mut().zip(bd) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, rg, Op::AddBroadcast { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// Multiply a tensor by a single learnable scalar (shape [1]).
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if self.shape(s) != [1] {
            return Err(Error::Shape(format!("scale_by_scalar: scale {:?} is not [1]", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = *o * sv;
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, rg, Op::ScaleByScalar { x, s }))
    }

    /// Sum of all elements, scalar output.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(acc), rg, Op::Sum { x }))
    }

    /// Per-head scaled dot-product scores between token streams.
    /// q:[B,Kq,D], k:[B,Kv,D] -> [B,heads,Kq,Kv], scale 1/sqrt(D/heads).
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape(format!("attn_scores: q {:?}, k {:?}", sq, sk)));
        }
        let d = sq[2];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attn_scores: width {} not divisible by {} heads", d, heads)));
        }
        let (bsz, kq, kv, dh) = (sq[0], sq[1], sk[1], d / heads);
        let scale = T::ONE / T::from_f64((dh as f64).sqrt());
        let mut out = Tensor::zeros(&[bsz, heads, kq, kv]);
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for h in 0..heads {
                    let qp = &qd[bi * kq * d + h * dh..];
                    let kp = &kd[bi * kv * d + h * dh..];
                    let op = &mut od[(bi * heads + h) * kq * kv..(bi * heads + h + 1) * kq * kv];
                    unsafe {
                        gemm_strided(
                            kq,
                            dh,
                            kv,
                            scale,
                            qp.as_ptr(),
                            d as isize,
                            1,
                            kp.as_ptr(),
                            1,
                            d as isize,
                            T::ZERO,
                            op.as_mut_ptr(),
                            kv as isize,
                            1,
                        );
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(out, rg, Op::AttnScores { q, k, heads }))
    }

    /// Apply attention weights to values: p:[B,h,Kq,Kv], v:[B,Kv,D] -> [B,Kq,D].
    pub fn attn_context(&mut self, p: Var, v: Var) -> Result<Var> {
        self.check(p)?;
        self.check(v)?;
        let sp = self.shape(p).to_vec();
        let sv = self.shape(v).to_vec();
        if sp.len() != 4 || sv.len() != 3 || sp[0] != sv[0] || sp[3] != sv[1] {
            return Err(Error::Shape(format!("attn_context: p {:?}, v {:?}", sp, sv)));
        }
        let (bsz, heads, kq, kv, d) = (sp[0], sp[1], sp[2], sp[3], sv[2]);
        if d % heads != 0 {
            return Err(Error::Shape(format!("attn_context: width {} not divisible by {} heads", d, heads)));
        }
        let dh = d / heads;
        let mut out = Tensor::zeros(&[bsz, kq, d]);
        {
            let pd = self.value(p).data();
            let vd = self.value(v).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for h in 0..heads {
                    let pp = &pd[(bi * heads + h) * kq * kv..(bi * heads + h + 1) * kq * kv];
                    let vp = &vd[bi * kv * d + h * dh..];
                    let op = &mut od[bi * kq * d + h * dh..];
                    unsafe {
                        gemm_strided(
                            kq,
                            kv,
                            dh,
                            T::ONE,
                            pp.as_ptr(),
                            kv as isize,
                            1,
                            vp.as_ptr(),
                            d as isize,
                            1,
                            T::ZERO,
                            op.as_mut_ptr(),
                            d as isize,
                            1,
                        );
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(out, rg, Op::AttnContext { p, v, heads }))
    }

    /// Reorder a conv map [B,C,H,W] into a token stream [B,H*W,C].
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape(format!("map_to_tokens: expected rank 4, got {:?}", sx)));
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let mut out = Tensor::zeros(&[bsz, hw, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    let src = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for (pi, &v) in src.iter().enumerate() {
                        od[bi * hw * c + pi * c + ci] = v;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MapToTokens { x }))
    }

    /// Concatenate token streams along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_tokens: no parts".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(Error::Shape(format!("concat_tokens: expected rank 3, got {:?}", first)));
        }
        let (bsz, d) = (first[0], first[2]);
        let mut total_k = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != bsz || s[2] != d {
                return Err(Error::Shape(format!("concat_tokens: incompatible part {:?} vs {:?}", s, first)));
            }
            total_k += s[1];
        }
        let mut out = Tensor::zeros(&[bsz, total_k, d]);
        {
            let od = out.data_mut();
            let mut k_off = 0usize;
            for &p in parts {
                let s = self.shape(p).to_vec();
                let pk = s[1];
                let pd = self.nodes[p.0].value.data();
                for bi in 0..bsz {
                    let dst = &mut od[(bi * total_k + k_off) * d..(bi * total_k + k_off + pk) * d];
                    dst.copy_from_slice(&pd[bi * pk * d..(bi + 1) * pk * d]);
                }
                k_off += pk;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rg, Op::ConcatTokens { parts: parts.to_vec() }))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy: logits {:?} not rank 2", s)));
        }
        let (bsz, c) = (s[0], s[1]);
        if labels.len() != bsz {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for batch {}",
                labels.len(),
                bsz
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("cross_entropy: label {} out of range (C={})", bad, c)));
        }
        let mut probs = vec![T::ZERO; bsz * c];
        let mut loss = T::ZERO;
        {
            let ld = self.value(logits).data();
            for bi in 0..bsz {
                let row = &ld[bi * c..(bi + 1) * c];
                let mut maxv = row[0];
                for &v in &row[1..] {
                    maxv = maxv.maxs(v);
                }
                let mut sum = T::ZERO;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - maxv).exp();
                    probs[bi * c + j] = e;
                    sum += e;
                }
                let lse = sum.ln();
                for j in 0..c {
                    probs[bi * c + j] = probs[bi * c + j] / sum;
                }
                loss += lse - (row[labels[bi]] - maxv);
            }
        }
        loss = loss / T::from_f64(bsz as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Take columns [start, start+len) of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("slice_last: rank 0".into()))?;
        if start + len > d || len == 0 {
            return Err(Error::Shape(format!(
                "slice_last: columns {}..{} out of range for last extent {}",
                start,
                start + len,
                d
            )));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let rows = self.value(x).numel() / d;
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for r in 0..rows {
                od[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SliceLast { x, start, len }))
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Extract one element (by flat index) as a scalar node.
    pub fn take_scalar(&mut self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        if index >= self.value(x).numel() {
            return Err(Error::Shape(format!(
                "take_scalar: index {} out of range for {:?}",
                index,
                self.shape(x)
            )));
        }
        let v = self.value(x).data()[index];
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), rg, Op::TakeScalar { x, index }))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// on a path from a grad-requiring leaf to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            // Nothing trainable reaches the loss; grads stay absent.
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(&[1], T::ONE));

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gout = self.grads[id].take().unwrap();
            self.accumulate_inputs(id, &gout)?;
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Tensor<T> {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        self.grads[v.0].as_mut().unwrap()
    }

    fn accumulate_inputs(&mut self, id: usize, gout: &Tensor<T>) -> Result<()> {
        // Take the op out temporarily to appease the borrow checker; Leaf is
        // a cheap placeholder.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let sx = self.shape(*x).to_vec();
                let (rows, din, dout) = (sx[0] * sx[1], sx[2], self.shape(*w)[0]);
                if self.rg(*x) {
                    let wd = self.nodes[w.0].value.data().as_ptr();
                    let g = self.ensure_grad(*x);
                    unsafe {
                        gemm_strided(
                            rows, dout, din, T::ONE,
                            gout.data().as_ptr(), dout as isize, 1,
                            wd, din as isize, 1,
                            T::ONE,
                            g.data_mut().as_mut_ptr(), din as isize, 1,
                        );
                    }
                }
                if self.rg(*w) {
                    let xd = self.nodes[x.0].value.data().as_ptr();
                    let g = self.ensure_grad(*w);
                    unsafe {
                        gemm_strided(
                            dout, rows, din, T::ONE,
                            gout.data().as_ptr(), 1, dout as isize,
                            xd, din as isize, 1,
                            T::ONE,
                            g.data_mut().as_mut_ptr(), din as isize, 1,
                        );
                    }
                }
                if self.rg(*b) {
                    let g = self.ensure_grad(*b);
                    let gd = g.data_mut();
                    for row in gout.data().chunks_exact(dout) {
                        for (gb, &v) in gd.iter_mut().zip(row) {
                            *gb += v;
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bd: Vec<T> = self.nodes[b.0].value.data().to_vec();
                    let g = self.ensure_grad(*a);
                    gemm(m, n, k, T::ONE, gout.data(), false, &bd, true, T::ONE, g.data_mut());
                }
                if self.rg(*b) {
                    let ad: Vec<T> = self.nodes[a.0].value.data().to_vec();
                    let g = self.ensure_grad(*b);
                    gemm(k, m, n, T::ONE, &ad, true, gout.data(), false, T::ONE, g.data_mut());
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let p: Vec<T> = self.nodes[id].value.data().to_vec();
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    let go = gout.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let mut dot = T::ZERO;
                            for j in 0..axis_len {
                                let idx = base + j * inner;
                                dot += go[idx] * p[idx];
                            }
                            for j in 0..axis_len {
                                let idx = base + j * inner;
                                gd[idx] += p[idx] * (go[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = self.nodes[x.0].value.numel() / d;
                let inv_d = T::ONE / T::from_f64(d as f64);
                let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                let gvec: Vec<T> = self.nodes[gamma.0].value.data().to_vec();
                let go = gout.data();
                if self.rg(*gamma) {
                    let g = self.ensure_grad(*gamma);
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let (mean, rstd) = saved[r];
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            gd[j] += go[r * d + j] * xhat;
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = self.ensure_grad(*beta);
                    let gd = g.data_mut();
                    for r in 0..rows {
                        for j in 0..d {
                            gd[j] += go[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    for r in 0..rows {
                        let (mean, rstd) = saved[r];
                        let mut sum_dy = T::ZERO;
                        let mut sum_dy_xhat = T::ZERO;
                        for j in 0..d {
                            let dy = go[r * d + j] * gvec[j];
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        for j in 0..d {
                            let dy = go[r * d + j] * gvec[j];
                            let xhat = (xd[r * d + j] - mean) * rstd;
                            gd[r * d + j] +=
                                rstd * (dy - inv_d * sum_dy - xhat * inv_d * sum_dy_xhat);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let so = self.nodes[id].value.shape().to_vec();
                let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let (oh, ow) = (so[2], so[3]);
                let ckk = c * k * k;
                let per = oh * ow;
                let bp = bsz * per;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let need_b = self.rg(*b);
                let go = gout.data();
                if need_w || need_x {
                    // dY permuted to [O, B*P]; one batched GEMM per operand.
                    let mut dy_mat = vec![T::ZERO; o * bp];
                    for bi in 0..bsz {
                        for oc in 0..o {
                            dy_mat[oc * bp + bi * per..oc * bp + (bi + 1) * per]
                                .copy_from_slice(&go[(bi * o + oc) * per..(bi * o + oc + 1) * per]);
                        }
                    }
                    if need_w {
                        let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                        let mut cols = vec![T::ZERO; ckk * bp];
                        for bi in 0..bsz {
                            im2col(
                                &xd[bi * c * h * wd..(bi + 1) * c * h * wd],
                                c, h, wd, k, *stride, *padding, oh, ow,
                                &mut cols, bp, bi * per,
                            );
                        }
                        let g = self.grads[w.0].get_or_insert_with(|| Tensor::zeros(&sw));
                        gemm(o, bp, ckk, T::ONE, &dy_mat, false, &cols, true, T::ONE, g.data_mut());
                    }
                    if need_x {
                        let wdn: Vec<T> = self.nodes[w.0].value.data().to_vec();
                        let mut dcols = vec![T::ZERO; ckk * bp];
                        gemm(ckk, o, bp, T::ONE, &wdn, true, &dy_mat, false, T::ZERO, &mut dcols);
                        let g = self.grads[x.0].get_or_insert_with(|| Tensor::zeros(&sx));
                        let gd = g.data_mut();
                        for bi in 0..bsz {
                            col2im_add(
                                &dcols,
                                c, h, wd, k, *stride, *padding, oh, ow,
                                &mut gd[bi * c * h * wd..(bi + 1) * c * h * wd],
                                bp, bi * per,
                            );
                        }
                    }
                }
                if need_b {
                    let g = self.ensure_grad(*b);
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for oc in 0..o {
                            let row = &go[(bi * o + oc) * per..(bi * o + oc + 1) * per];
                            let mut acc = T::ZERO;
                            for &v in row {
                                acc += v;
                            }
                            gd[oc] += acc;
                        }
                    }
                }
            }
            Op::BatchNorm2d { x, gamma, beta, eps, mean, var, train } => {
                let sx = self.shape(*x).to_vec();
                let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let plane = h * w;
                let n = bsz * plane;
                let inv_n = T::ONE / T::from_f64(n as f64);
                let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                let gvec: Vec<T> = self.nodes[gamma.0].value.data().to_vec();
                let go = gout.data();
                // Per-channel reductions used by all three gradients.
                let mut sum_dy = vec![T::ZERO; c];
                let mut sum_dy_xhat = vec![T::ZERO; c];
                let rstd: Vec<T> = var.iter().map(|&v| T::ONE / (v + *eps).sqrt()).collect();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let mut a0 = T::ZERO;
                        let mut a1 = T::ZERO;
                        for i in 0..plane {
                            let dy = go[base + i];
                            let xhat = (xd[base + i] - mean[ci]) * rstd[ci];
                            a0 += dy;
                            a1 += dy * xhat;
                        }
                        sum_dy[ci] += a0;
                        sum_dy_xhat[ci] += a1;
                    }
                }
                if self.rg(*gamma) {
                    let g = self.ensure_grad(*gamma);
                    for (gd, &v) in g.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *gd += v;
                    }
                }
                if self.rg(*beta) {
                    let g = self.ensure_grad(*beta);
                    for (gd, &v) in g.data_mut().iter_mut().zip(&sum_dy) {
                        *gd += v;
                    }
                }
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let scale = gvec[ci] * rstd[ci];
                            if *train {
                                for i in 0..plane {
                                    let dy = go[base + i];
                                    let xhat = (xd[base + i] - mean[ci]) * rstd[ci];
                                    gd[base + i] += scale
                                        * (dy - inv_n * sum_dy[ci] - xhat * inv_n * sum_dy_xhat[ci]);
                                }
                            } else {
                                for i in 0..plane {
                                    gd[base + i] += scale * go[base + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                    let g = self.ensure_grad(*x);
                    for ((gd, &v), &dy) in g.data_mut().iter_mut().zip(&xd).zip(gout.data()) {
                        if v > T::ZERO {
                            *gd += dy;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let c = T::from_f64(0.7978845608028654);
                    let a = T::from_f64(0.044715);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                    let g = self.ensure_grad(*x);
                    for ((gd, &v), &dy) in g.data_mut().iter_mut().zip(&xd).zip(gout.data()) {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let sech2 = T::ONE - t * t;
                        let du = c * (T::ONE + three * a * v * v);
                        let d = half * (T::ONE + t) + half * v * sech2 * du;
                        *gd += dy * d;
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    for (&src, &dy) in argmax.iter().zip(gout.data()) {
                        gd[src as usize] += dy;
                    }
                }
            }
            Op::MeanPoolTokens { x } => {
                if self.rg(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (bsz, k, d) = (sx[0], sx[1], sx[2]);
                    let inv_k = T::ONE / T::from_f64(k as f64);
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    let go = gout.data();
                    for bi in 0..bsz {
                        for ki in 0..k {
                            let row = &mut gd[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                            for (r, &dy) in row.iter_mut().zip(&go[bi * d..(bi + 1) * d]) {
                                *r += dy * inv_k;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let g = self.ensure_grad(*v);
                        for (gd, &dy) in g.data_mut().iter_mut().zip(gout.data()) {
                            *gd += dy;
                        }
                    }
                }
            }
            Op::AddBroadcast { x, bias } => {
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    for (gd, &dy) in g.data_mut().iter_mut().zip(gout.data()) {
                        *gd += dy;
                    }
                }
                if self.rg(*bias) {
                    let per = self.nodes[bias.0].value.numel();
                    let g = self.ensure_grad(*bias);
                    let gd = g.data_mut();
                    for chunk in gout.data().chunks_exact(per) {
                        for (gb, &dy) in gd.iter_mut().zip(chunk) {
                            *gb += dy;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bd: Vec<T> = self.nodes[b.0].value.data().to_vec();
                    let g = self.ensure_grad(*a);
                    for ((gd, &v), &dy) in g.data_mut().iter_mut().zip(&bd).zip(gout.data()) {
                        *gd += dy * v;
                    }
                }
                if self.rg(*b) {
                    let ad: Vec<T> = self.nodes[a.0].value.data().to_vec();
                    let g = self.ensure_grad(*b);
                    for ((gd, &v), &dy) in g.data_mut().iter_mut().zip(&ad).zip(gout.data()) {
                        *gd += dy * v;
                    }
                }
            }
            Op::ScaleByScalar { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    for (gd, &dy) in g.data_mut().iter_mut().zip(gout.data()) {
                        *gd += dy * sv;
                    }
                }
                if self.rg(*s) {
                    let xd: Vec<T> = self.nodes[x.0].value.data().to_vec();
                    let mut acc = T::ZERO;
                    for (&v, &dy) in xd.iter().zip(gout.data()) {
                        acc += dy * v;
                    }
                    let g = self.ensure_grad(*s);
                    g.data_mut()[0] += acc;
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let dy = gout.data()[0];
                    let g = self.ensure_grad(*x);
                    for gd in g.data_mut() {
                        *gd += dy;
                    }
                }
            }
            Op::AttnScores { q, k, heads } => {
                let sq = self.shape(*q).to_vec();
                let sk = self.shape(*k).to_vec();
                let (bsz, kq, kv, d) = (sq[0], sq[1], sk[1], sq[2]);
                let dh = d / heads;
                let scale = T::ONE / T::from_f64((dh as f64).sqrt());
                let go = gout.data();
                if self.rg(*q) {
                    let kd: Vec<T> = self.nodes[k.0].value.data().to_vec();
                    let g = self.grads[q.0].get_or_insert_with(|| Tensor::zeros(&sq));
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for h in 0..*heads {
                            let gp = &go[(bi * heads + h) * kq * kv..];
                            unsafe {
                                gemm_strided(
                                    kq, kv, dh, scale,
                                    gp.as_ptr(), kv as isize, 1,
                                    kd.as_ptr().add(bi * kv * d + h * dh), d as isize, 1,
                                    T::ONE,
                                    gd.as_mut_ptr().add(bi * kq * d + h * dh), d as isize, 1,
                                );
                            }
                        }
                    }
                }
                if self.rg(*k) {
                    let qd: Vec<T> = self.nodes[q.0].value.data().to_vec();
                    let g = self.grads[k.0].get_or_insert_with(|| Tensor::zeros(&sk));
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for h in 0..*heads {
                            let gp = &go[(bi * heads + h) * kq * kv..];
                            unsafe {
                                gemm_strided(
                                    kv, kq, dh, scale,
                                    gp.as_ptr(), 1, kv as isize,
                                    qd.as_ptr().add(bi * kq * d + h * dh), d as isize, 1,
                                    T::ONE,
                                    gd.as_mut_ptr().add(bi * kv * d + h * dh), d as isize, 1,
                                );
                            }
                        }
                    }
                }
            }
            Op::AttnContext { p, v, heads } => {
                let sp = self.shape(*p).to_vec();
                let sv = self.shape(*v).to_vec();
                let (bsz, kq, kv, d) = (sp[0], sp[2], sp[3], sv[2]);
                let dh = d / heads;
                let go = gout.data();
                if self.rg(*p) {
                    let vd: Vec<T> = self.nodes[v.0].value.data().to_vec();
                    let g = self.grads[p.0].get_or_insert_with(|| Tensor::zeros(&sp));
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for h in 0..*heads {
                            unsafe {
                                gemm_strided(
                                    kq, dh, kv, T::ONE,
                                    go.as_ptr().add(bi * kq * d + h * dh), d as isize, 1,
                                    vd.as_ptr().add(bi * kv * d + h * dh), 1, d as isize,
                                    T::ONE,
                                    gd.as_mut_ptr().add((bi * heads + h) * kq * kv), kv as isize, 1,
                                );
                            }
                        }
                    }
                }
                if self.rg(*v) {
                    let pd: Vec<T> = self.nodes[p.0].value.data().to_vec();
                    let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&sv));
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for h in 0..*heads {
                            unsafe {
                                gemm_strided(
                                    kv, kq, dh, T::ONE,
                                    pd.as_ptr().add((bi * heads + h) * kq * kv), 1, kv as isize,
                                    go.as_ptr().add(bi * kq * d + h * dh), d as isize, 1,
                                    T::ONE,
                                    gd.as_mut_ptr().add(bi * kv * d + h * dh), d as isize, 1,
                                );
                            }
                        }
                    }
                }
            }
            Op::MapToTokens { x } => {
                if self.rg(*x) {
                    let sx = self.shape(*x).to_vec();
                    let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let hw = h * w;
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    let go = gout.data();
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let dst = &mut gd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            for (pi, d) in dst.iter_mut().enumerate() {
                                *d += go[bi * hw * c + pi * c + ci];
                            }
                        }
                    }
                }
            }
            Op::ConcatTokens { parts } => {
                let so = self.nodes[id].value.shape().to_vec();
                let (bsz, total_k, d) = (so[0], so[1], so[2]);
                let go = gout.data();
                let mut k_off = 0usize;
                for &p in parts {
                    let pk = self.shape(p)[1];
                    if self.rg(p) {
                        let g = self.ensure_grad(p);
                        let gd = g.data_mut();
                        for bi in 0..bsz {
                            let src = &go[(bi * total_k + k_off) * d..(bi * total_k + k_off + pk) * d];
                            for (gv, &dy) in gd[bi * pk * d..(bi + 1) * pk * d].iter_mut().zip(src) {
                                *gv += dy;
                            }
                        }
                    }
                    k_off += pk;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let s = self.shape(*logits).to_vec();
                    let (bsz, c) = (s[0], s[1]);
                    let dy = gout.data()[0] / T::from_f64(bsz as f64);
                    let g = self.grads[logits.0].get_or_insert_with(|| Tensor::zeros(&s));
                    let gd = g.data_mut();
                    for bi in 0..bsz {
                        for j in 0..c {
                            let onehot = if labels[bi] == j { T::ONE } else { T::ZERO };
                            gd[bi * c + j] += dy * (probs[bi * c + j] - onehot);
                        }
                    }
                }
            }
            Op::TakeScalar { x, index } => {
                if self.rg(*x) {
                    let dy = gout.data()[0];
                    let g = self.ensure_grad(*x);
                    g.data_mut()[*index] += dy;
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.rg(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let rows = self.nodes[x.0].value.numel() / d;
                    let g = self.ensure_grad(*x);
                    let gd = g.data_mut();
                    let go = gout.data();
                    for r in 0..rows {
                        for j in 0..*len {
                            gd[r * d + start + j] += go[r * len + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let g = self.ensure_grad(*x);
                    for (gd, &dy) in g.data_mut().iter_mut().zip(gout.data()) {
                        *gd += dy;
                    }
                }
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}
