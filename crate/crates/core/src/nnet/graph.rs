//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! analytic gradients into every node that depends on a gradient-requiring
//! leaf.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        /// im2col buffers per batch item, reused in the backward pass.
        cols: Vec<Vec<T>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    NchwToNhwc(Var),
    /// Concatenate `[B, n_i]` tensors into `[B, Σ n_i]`.
    ConcatRows(Vec<Var>),
    /// Scalar whose partial derivatives were computed alongside its value.
    Fused { inputs: Vec<Var>, grads: Vec<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output spatial size of a convolution.
pub fn conv_out(size: usize, k: usize, geo: ConvGeometry) -> Option<usize> {
    (size + 2 * geo.pad)
        .checked_sub(k)
        .map(|d| d / geo.stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let n = ho * wo;
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let n = ho * wo;
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, or `None` if no gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// 2-D convolution of `x: [B, C, H, W]` with square kernels
    /// `w: [O, C, k, k]` and optional bias `b: [O]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bsz, c, h, wd) = match xs[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be 4-D, got {xs:?}"))),
        };
        let (o, k) = match ws[..] {
            [o, ci, k, k2] if ci == c && k == k2 => (o, k),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {ws:?} incompatible with input {xs:?}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} filters", self.value(b).shape()),
                ));
            }
        }
        if geo.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ho, wo) = match (conv_out(h, k, geo), conv_out(wd, k, geo)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", format!("kernel {k} larger than input"))),
        };
        let ck = c * k * k;
        let n = ho * wo;
        let mut out = vec![T::zero(); bsz * o * n];
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let mut cols_all = Vec::with_capacity(if rg { bsz } else { 0 });
        let mut cols = vec![T::zero(); ck * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for bi in 0..bsz {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, geo, ho, wo, &mut cols);
                let dst = &mut out[bi * o * n..(bi + 1) * o * n];
                if let Some(bias) = bias {
                    for (oi, row) in dst.chunks_mut(n).enumerate() {
                        row.fill(bias[oi]);
                    }
                }
                T::gemm(o, ck, n, wv, false, &cols, false, T::one(), dst);
                if rg {
                    cols_all.push(cols.clone());
                }
            }
        }
        let value = Tensor::new(vec![bsz, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                cols: cols_all,
            },
            rg,
        ))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, |a| a.ln(), Op::Log(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.value(x).shape())))?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::of_usize(v.numel());
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// `[B, C, H, W]` to `[B, H, W, C]`.
    pub fn nchw_to_nhwc(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = match v.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(Error::shape("nchw_to_nhwc", format!("{s:?}"))),
        };
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * h * w;
            for ci in 0..c {
                for p in 0..h * w {
                    out[base + p * c + ci] = src[base + ci * h * w + p];
                }
            }
        }
        let value = Tensor::new(vec![b, h, w, c], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::NchwToNhwc(x), rg))
    }

    /// Concatenate `[B, n_i]` tensors along the second axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::shape("concat_rows", "no inputs"))?;
        let b = self.value(first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).shape() {
                &[pb, n] if pb == b => widths.push(n),
                s => return Err(Error::shape("concat_rows", format!("part {s:?} with batch {b}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for bi in 0..b {
            for (&p, &n) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[bi * n..(bi + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![b, total], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Register a scalar computed outside the graph together with its
    /// partial derivatives with respect to `inputs`.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::shape("fused_scalar", "one gradient per input"));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.value(v).numel() != g.len() {
                return Err(Error::shape(
                    "fused_scalar",
                    format!("gradient of length {} for {:?}", g.len(), self.value(v).shape()),
                ));
            }
        }
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Add into the gradient of `target`; the closure also sees the
    /// target's forward value.
    fn accumulate(&mut self, target: Var, delta: impl FnOnce(&Tensor<T>, &mut [T])) {
        if !self.needs(target) {
            return;
        }
        let node = &mut self.nodes[target.0];
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
        delta(&node.value, g);
    }

    /// Backpropagate from `out`, seeding its gradient with ones.
    pub fn backward(&mut self, out: Var) {
        let n = self.value(out).numel();
        self.nodes[out.0].grad = Some(vec![T::one(); n]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
    }

    fn backward_op(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Relu(x) => {
                self.accumulate(*x, |xv, d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv.data()) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[node].value.data().to_vec();
                self.accumulate(*x, |_, d| {
                    for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(&y) {
                        *d = *d + gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Log(x) => {
                self.accumulate(*x, |xv, d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv.data()) {
                        *d = *d + gi / xi;
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |_, d| {
                        for (d, &gi) in d.iter_mut().zip(g) {
                            *d = *d + gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |_, d| {
                    for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(&bv) {
                        *d = *d + gi * bi;
                    }
                });
                self.accumulate(*b, |_, d| {
                    for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(&av) {
                        *d = *d + gi * ai;
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(*x, |_, d| {
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d = *d + gi;
                }
            }),
            Op::Sum(x) => self.accumulate(*x, |_, d| {
                for d in d.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of_usize(self.value(*x).numel());
                self.accumulate(*x, |_, d| {
                    for d in d.iter_mut() {
                        *d = *d + g[0] / n;
                    }
                });
            }
            Op::NchwToNhwc(x) => {
                let (b, c, h, w) = match self.value(*x).shape() {
                    &[b, c, h, w] => (b, c, h, w),
                    _ => unreachable!("validated in forward"),
                };
                self.accumulate(*x, |_, d| {
                    for bi in 0..b {
                        let base = bi * c * h * w;
                        for ci in 0..c {
                            for p in 0..h * w {
                                let j = base + ci * h * w + p;
                                d[j] = d[j] + g[base + p * c + ci];
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let b = self.value(parts[0]).shape()[0];
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &n) in parts.iter().zip(&widths) {
                    self.accumulate(p, |_, d| {
                        for bi in 0..b {
                            for j in 0..n {
                                d[bi * n + j] = d[bi * n + j] + g[bi * total + offset + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Fused { inputs, grads } => {
                for (&v, pg) in inputs.iter().zip(grads) {
                    self.accumulate(v, |_, d| {
                        for (d, &p) in d.iter_mut().zip(pg) {
                            *d = *d + g[0] * p;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geo, cols } => self.conv_backward(*x, *w, *b, *geo, cols, node, g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        cols: &[Vec<T>],
        node: usize,
        g: &[T],
    ) {
        let (bsz, c, h, wd) = match self.value(x).shape() {
            &[b, c, h, w] => (b, c, h, w),
            _ => unreachable!("validated in forward"),
        };
        let (o, k) = {
            let s = self.value(w).shape();
            (s[0], s[2])
        };
        let (ho, wo) = {
            let s = self.nodes[node].value.shape();
            (s[2], s[3])
        };
        let n = ho * wo;
        let ck = c * k * k;
        if let Some(b) = b {
            self.accumulate(b, |_, d| {
                for bi in 0..bsz {
                    for (oi, d) in d.iter_mut().enumerate() {
                        let row = &g[(bi * o + oi) * n..(bi * o + oi + 1) * n];
                        *d = *d + row.iter().copied().sum::<T>();
                    }
                }
            });
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); o * ck];
            for (bi, cols) in cols.iter().enumerate() {
                let gb = &g[bi * o * n..(bi + 1) * o * n];
                T::gemm(o, n, ck, gb, false, cols, true, T::one(), &mut dw);
            }
            self.accumulate(w, |_, d| {
                for (d, &v) in d.iter_mut().zip(&dw) {
                    *d = *d + v;
                }
            });
        }
        if self.needs(x) {
            let wv = self.value(w).data().to_vec();
            let mut dcols = vec![T::zero(); ck * n];
            let plane = c * h * wd;
            self.accumulate(x, |_, dx| {
                for bi in 0..bsz {
                    let gb = &g[bi * o * n..(bi + 1) * o * n];
                    T::gemm(ck, o, n, &wv, true, gb, false, T::zero(), &mut dcols);
                    col2im(&dcols, c, h, wd, k, geo, ho, wo, &mut dx[bi * plane..(bi + 1) * plane]);
                }
            });
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
