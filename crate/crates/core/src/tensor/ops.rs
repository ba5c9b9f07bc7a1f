//! Differentiable operations on [`Var`].

use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`; keeps the spatial size at stride 1.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Which axes a global pool reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Over H and W: `[N, C, H, W] -> [N, C, 1, 1]`.
    Spatial,
    /// Over C: `[N, C, H, W] -> [N, 1, H, W]`.
    Channel,
}

/// Strides of `b` viewed inside `a`'s shape (0 along broadcast dims).
fn broadcast_strides(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.is_empty() || (b.len() == 1 && b[0] == 1) {
        return Ok(vec![0; a.len()]);
    }
    if a.len() != b.len() {
        return Err(Error::shape(op, "rank", a.len(), b.len()));
    }
    let mut strides = vec![0; a.len()];
    let mut acc = 1;
    for d in (0..a.len()).rev() {
        if b[d] == a[d] {
            strides[d] = acc;
        } else if b[d] != 1 {
            return Err(Error::shape(op, format!("dim {d}"), a[d], b[d]));
        }
        acc *= b[d];
    }
    Ok(strides)
}

/// Calls `f(i, j)` for every flat index `i` of shape `a` with the matching
/// flat index `j` of the broadcast operand.
fn for_each_broadcast(a: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = a.iter().product();
    if numel == 0 {
        return;
    }
    let rank = a.len();
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for i in 0..numel {
        f(i, j);
        for d in (0..rank).rev() {
            idx[d] += 1;
            j += strides[d];
            if idx[d] < a[d] {
                break;
            }
            j -= strides[d] * a[d];
            idx[d] = 0;
        }
    }
}

impl<'t, F: Real> Var<'t, F> {
    fn unary(&self, value: Tensor<F>, backward: impl Fn(&Tensor<F>) -> Tensor<F> + 'static) -> Self {
        self.tape
            .record(value, &[self], move |g, _| vec![Some(backward(g))])
    }

    /// `self + other`, with `other` broadcast along its size-1 dims.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary("add", other, |a, b| a + b, |_, _| (F::one(), F::one()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary("sub", other, |a, b| a - b, |_, _| (F::one(), -F::one()))
    }

    /// Elementwise product, with `other` broadcast along its size-1 dims.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_binary("mul", other, |a, b| a * b, |a, b| (b, a))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        other: &Self,
        f: impl Fn(F, F) -> F,
        df: impl Fn(F, F) -> (F, F) + 'static,
    ) -> Result<Self> {
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let strides = broadcast_strides(op, &a_shape, &b_shape)?;
        let (ad, bd) = (self.value.data(), other.value.data());
        let mut out = vec![F::zero(); ad.len()];
        for_each_broadcast(&a_shape, &strides, |i, j| out[i] = f(ad[i], bd[j]));
        let value = Tensor::from_parts(a_shape.clone(), out);
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(value, &[self, other], move |g, need| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut ga = need[0].then(|| vec![F::zero(); ad.len()]);
            let mut gb = need[1].then(|| vec![F::zero(); bd.len()]);
            for_each_broadcast(&a_shape, &strides, |i, j| {
                let (da, db) = df(ad[i], bd[j]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] = gd[i] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] = gb[j] + gd[i] * db;
                }
            });
            vec![
                ga.map(|v| Tensor::from_parts(a_shape.clone(), v)),
                gb.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
            ]
        }))
    }

    pub fn add_scalar(&self, c: F) -> Self {
        self.unary(self.value.map(|v| v + c), |g| g.clone())
    }

    pub fn scale(&self, c: F) -> Self {
        self.unary(self.value.map(|v| v * c), move |g| g.map(|v| v * c))
    }

    /// ReLU; the subgradient at 0 is taken as 0.
    pub fn relu(&self) -> Self {
        let x = self.value.clone();
        self.unary(self.value.map(|v| v.max(F::zero())), move |g| {
            g.zip_map(&x, |g, x| if x > F::zero() { g } else { F::zero() })
                .expect("same shape")
        })
    }

    pub fn sigmoid(&self) -> Self {
        let y = self.value.map(sigmoid);
        let saved = y.clone();
        self.unary(y, move |g| {
            g.zip_map(&saved, |g, s| g * s * (F::one() - s)).expect("same shape")
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        let x = self.value.clone();
        self.unary(self.value.map(softplus), move |g| {
            g.zip_map(&x, |g, x| g * sigmoid(x)).expect("same shape")
        })
    }

    pub fn exp(&self) -> Self {
        let y = self.value.map(|v| v.exp());
        let saved = y.clone();
        self.unary(y, move |g| g.zip_map(&saved, |g, y| g * y).expect("same shape"))
    }

    pub fn activation(&self, kind: Activation) -> Self {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Softplus => self.softplus(),
        }
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self) -> Self {
        let shape = self.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| {
            Tensor::full(shape.clone(), g.data()[0])
        })
    }

    pub fn mean(&self) -> Self {
        let n = F::lit(self.value.numel().max(1) as f64);
        self.sum().scale(F::one() / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let original = self.shape().to_vec();
        let value = self.value.reshape(shape)?;
        Ok(self.unary(value, move |g| g.reshape(original.clone()).expect("numel preserved")))
    }

    /// 2D cross-correlation. `self` is `[N, Cin, H, W]`, `kernel` is
    /// `[Cout, Cin, kh, kw]` with odd kernel sizes, `bias` is `[Cout]`.
    pub fn conv2d(&self, kernel: &Self, bias: Option<&Self>, stride: usize, padding: Padding) -> Result<Self> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.value.dims4()?;
        let (cout, kcin, kh, kw) = kernel.value.dims4().map_err(|_| {
            Error::shape(OP, "kernel rank", 4, kernel.shape().len())
        })?;
        if kcin != cin {
            return Err(Error::shape(OP, "input channels (dim 1)", kcin, cin));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel size {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(OP, "bias", format!("[{cout}]"), format!("{:?}", b.shape())));
            }
        }
        let pad = match padding {
            Padding::Same => (kh.max(kw) - 1) / 2,
            Padding::Valid => 0,
        };
        if kh != kw && padding == Padding::Same {
            return Err(Error::invalid(OP, "same padding needs a square kernel"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(OP, "spatial (dims 2,3)", format!(">= {kh}x{kw}"), format!("{h}x{w}")));
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value.data(),
            kernel.value.data(),
            bias.map(|b| b.value.data()),
            &g,
        );
        let value = Tensor::from_parts(vec![n, cout, g.ho, g.wo], out);
        let (x, k) = (self.value.clone(), kernel.value.clone());
        let inputs: Vec<&Self> = match bias {
            Some(b) => vec![self, kernel, b],
            None => vec![self, kernel],
        };
        Ok(self.tape.record(value, &inputs, move |gout, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let grads = kernels::conv2d_backward(x.data(), k.data(), gout.data(), &g, [need[0], need[1], need_b]);
            let mut out = vec![
                grads.input.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                grads.kernel.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
            ];
            if need.len() == 3 {
                out.push(grads.bias.map(|d| Tensor::from_parts(vec![g.cout], d)));
            }
            out
        }))
    }

    /// Windowed pooling without padding; trailing rows/columns that do not
    /// fill a window are dropped.
    pub fn pool2d(&self, kind: PoolKind, window: usize, stride: usize) -> Result<Self> {
        const OP: &str = "pool2d";
        let (n, c, h, w) = self.value.dims4()?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be positive"));
        }
        if h < window || w < window {
            return Err(Error::shape(OP, "spatial (dims 2,3)", format!(">= {window}"), format!("{h}x{w}")));
        }
        let g = PoolGeom {
            planes: n * c,
            h,
            w,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        };
        let shape = vec![n, c, g.ho, g.wo];
        let in_shape = self.shape().to_vec();
        Ok(match kind {
            PoolKind::Max => {
                let (out, arg) = kernels::max_pool_forward(self.value.data(), &g);
                self.unary(Tensor::from_parts(shape, out), move |gout| {
                    let mut dx = vec![F::zero(); in_shape.iter().product()];
                    for (&i, &gv) in arg.iter().zip(gout.data()) {
                        dx[i] = dx[i] + gv;
                    }
                    Tensor::from_parts(in_shape.clone(), dx)
                })
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(self.value.data(), &g);
                self.unary(Tensor::from_parts(shape, out), move |gout| {
                    Tensor::from_parts(in_shape.clone(), kernels::avg_pool_backward(gout.data(), &g))
                })
            }
        })
    }

    /// Reduces a `[N, C, H, W]` value over the spatial plane or over channels.
    pub fn global_pool(&self, kind: PoolKind, axis: PoolAxis) -> Result<Self> {
        let (n, c, h, w) = self.value.dims4()?;
        let plane = h * w;
        let x = self.value.data();
        // (output index, input indices) layout: each output reduces `len`
        // inputs at `base(o) + t * step`.
        let (out_shape, outputs, len, step): (Vec<usize>, usize, usize, usize) = match axis {
            PoolAxis::Spatial => (vec![n, c, 1, 1], n * c, plane, 1),
            PoolAxis::Channel => (vec![n, 1, h, w], n * plane, c, plane),
        };
        let base = move |o: usize| match axis {
            PoolAxis::Spatial => o * plane,
            PoolAxis::Channel => (o / plane) * c * plane + o % plane,
        };
        let in_shape = self.shape().to_vec();
        match kind {
            PoolKind::Avg => {
                let inv = F::one() / F::lit(len as f64);
                let out: Vec<F> = (0..outputs)
                    .map(|o| (0..len).map(|t| x[base(o) + t * step]).sum::<F>() * inv)
                    .collect();
                Ok(self.unary(Tensor::from_parts(out_shape, out), move |g| {
                    let mut dx = vec![F::zero(); in_shape.iter().product()];
                    for (o, &gv) in g.data().iter().enumerate() {
                        for t in 0..len {
                            dx[base(o) + t * step] = gv * inv;
                        }
                    }
                    Tensor::from_parts(in_shape.clone(), dx)
                }))
            }
            PoolKind::Max => {
                let mut arg = Vec::with_capacity(outputs);
                let out: Vec<F> = (0..outputs)
                    .map(|o| {
                        let mut best = base(o);
                        for t in 1..len {
                            let i = base(o) + t * step;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        arg.push(best);
                        x[best]
                    })
                    .collect();
                Ok(self.unary(Tensor::from_parts(out_shape, out), move |g| {
                    let mut dx = vec![F::zero(); in_shape.iter().product()];
                    for (&i, &gv) in arg.iter().zip(g.data()) {
                        dx[i] = dx[i] + gv;
                    }
                    Tensor::from_parts(in_shape.clone(), dx)
                }))
            }
        }
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&self) -> Result<Self> {
        let (n, c, h, w) = self.value.dims4()?;
        let out = kernels::upsample2x_forward(self.value.data(), n * c, h, w);
        let in_shape = self.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out), move |g| {
            Tensor::from_parts(in_shape.clone(), kernels::upsample2x_backward(g.data(), n * c, h, w))
        }))
    }

    /// Group normalization with per-channel affine `gamma`, `beta` (`[C]`).
    pub fn group_norm(&self, groups: usize, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        const OP: &str = "group_norm";
        let dims @ (_, c, _, _) = self.value.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(OP, format!("{c} channels not divisible into {groups} groups")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if p.shape() != [c] {
                return Err(Error::shape(OP, name, format!("[{c}]"), format!("{:?}", p.shape())));
            }
        }
        let (y, cache) = kernels::group_norm_forward(
            self.value.data(),
            dims,
            groups,
            gamma.value.data(),
            beta.value.data(),
            F::lit(eps),
        );
        let shape = self.shape().to_vec();
        let gamma_v = gamma.value.clone();
        let cache = Arc::new(cache);
        Ok(self.tape.record(
            Tensor::from_parts(shape.clone(), y),
            &[self, gamma, beta],
            move |g, _| {
                let (dx, dg, db) = kernels::group_norm_backward(g.data(), dims, groups, gamma_v.data(), &cache);
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![dims.1], dg)),
                    Some(Tensor::from_parts(vec![dims.1], db)),
                ]
            },
        ))
    }

    /// Concatenates `[N, C_i, H, W]` values along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        const OP: &str = "concat_channels";
        let first = parts.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let (n, _, h, w) = first.value.dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(OP, "N,H,W", format!("{n},{h},{w}"), format!("{pn},{ph},{pw}")));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&p.value.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, total, h, w], out);
        Ok(first.tape.record(value, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            chans
                .iter()
                .zip(need)
                .map(|(&pc, &needed)| {
                    let start = offset;
                    offset += pc;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let row = (s * total + start) * plane;
                            d.extend_from_slice(&gd[row..row + pc * plane]);
                        }
                        Tensor::from_parts(vec![n, pc, h, w], d)
                    })
                })
                .collect()
        }))
    }

    /// Channels `start..start + len` of a `[N, C, H, W]` value.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, h, w) = self.value.dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::shape("narrow_channels", "channels", format!("<= {c}"), start + len));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let row = (s * c + start) * plane;
            out.extend_from_slice(&self.value.data()[row..row + len * plane]);
        }
        let in_shape = self.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(vec![n, len, h, w], out), move |g| {
            let mut dx = vec![F::zero(); in_shape.iter().product()];
            for s in 0..n {
                let row = (s * c + start) * plane;
                dx[row..row + len * plane].copy_from_slice(&g.data()[s * len * plane..(s + 1) * len * plane]);
            }
            Tensor::from_parts(in_shape.clone(), dx)
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv<F: Real>(y: F) -> F {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}
