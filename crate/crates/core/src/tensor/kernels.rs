//! Raw NCHW kernels on slices. Per-sample work is spread over the rayon
//! pool; every cross-sample reduction runs sequentially in sample order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` [n, cin, h, w] with `k` [cout, cin, kh, kw].
pub(crate) fn conv2d_forward<F: Real>(x: &[F], k: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![F::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(g.cout * plane)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * in_len..(n + 1) * in_len];
            let mut scratch;
            let col: &[F] = if g.pointwise() {
                x_n
            } else {
                scratch = vec![F::zero(); patch * plane];
                im2col(x_n, g, &mut scratch);
                &scratch
            };
            F::gemm(
                g.cout,
                patch,
                plane,
                F::one(),
                k,
                (patch as isize, 1),
                col,
                (plane as isize, 1),
                F::zero(),
                out_n,
            );
            if let Some(b) = bias {
                for (co, row) in out_n.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv2d_backward<F: Real>(
    x: &[F],
    k: &[F],
    gout: &[F],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<F> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;

    // (input gradient, kernel gradient) of each sample
    type SampleGrads<F> = (Option<Vec<F>>, Option<Vec<F>>);
    let per_sample: Vec<SampleGrads<F>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_len..(n + 1) * in_len];
            let go = &gout[n * out_len..(n + 1) * out_len];
            let dk = need[1].then(|| {
                let mut scratch;
                let col: &[F] = if g.pointwise() {
                    x_n
                } else {
                    scratch = vec![F::zero(); patch * plane];
                    im2col(x_n, g, &mut scratch);
                    &scratch
                };
                let mut dk = vec![F::zero(); g.cout * patch];
                F::gemm(
                    g.cout,
                    plane,
                    patch,
                    F::one(),
                    go,
                    (plane as isize, 1),
                    col,
                    (1, plane as isize),
                    F::zero(),
                    &mut dk,
                );
                dk
            });
            let dx = need[0].then(|| {
                let mut dcol = vec![F::zero(); patch * plane];
                F::gemm(
                    patch,
                    g.cout,
                    plane,
                    F::one(),
                    k,
                    (1, patch as isize),
                    go,
                    (plane as isize, 1),
                    F::zero(),
                    &mut dcol,
                );
                if g.pointwise() {
                    dcol
                } else {
                    let mut dx = vec![F::zero(); in_len];
                    col2im(&dcol, g, &mut dx);
                    dx
                }
            });
            (dx, dk)
        })
        .collect();

    let mut input = need[0].then(|| Vec::with_capacity(g.n * in_len));
    let mut kernel = need[1].then(|| vec![F::zero(); g.cout * patch]);
    for (dx, dk) in per_sample {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (kernel.as_mut(), dk) {
            acc.iter_mut().zip(dk).for_each(|(a, b)| *a = *a + b);
        }
    }
    let bias = need[2].then(|| {
        let mut db = vec![F::zero(); g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let row = &gout[n * out_len + co * plane..][..plane];
                *d = *d + row.iter().copied().sum::<F>();
            }
        }
        db
    });
    ConvGrads {
        input,
        kernel,
        bias,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling; also returns the flat input index of each selected element
/// (first maximum on ties).
pub(crate) fn max_pool_forward<F: Real>(x: &[F], g: &PoolGeom) -> (Vec<F>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = F::neg_infinity();
                let mut best_i = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let i = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward<F: Real>(x: &[F], g: &PoolGeom) -> Vec<F> {
    let inv = F::one() / F::lit((g.window * g.window) as f64);
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut s = F::zero();
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.window {
                        s = s + x[row + kx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<F: Real>(gout: &[F], g: &PoolGeom) -> Vec<F> {
    let inv = F::one() / F::lit((g.window * g.window) as f64);
    let mut dx = vec![F::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = gout[(p * g.ho + oy) * g.wo + ox] * inv;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.window {
                        dx[row + kx] = dx[row + kx] + go;
                    }
                }
            }
        }
    }
    dx
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
pub(crate) struct GroupNormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn group_norm_forward<F: Real>(
    x: &[F],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, GroupNormCache<F>) {
    let cpg = c / groups;
    let glen = cpg * h * w;
    let plane = h * w;
    let count = F::lit(glen as f64);
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); n * groups];
    xhat.par_chunks_mut(glen)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(ng, (xh, is))| {
            let src = &x[ng * glen..(ng + 1) * glen];
            let mean = src.iter().copied().sum::<F>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
            let inv = F::one() / (var + eps).sqrt();
            *is = inv;
            xh.iter_mut().zip(src).for_each(|(d, &v)| *d = (v - mean) * inv);
        });
    let mut y = vec![F::zero(); x.len()];
    y.par_chunks_mut(plane).enumerate().for_each(|(nc, row)| {
        let ch = nc % c;
        let xh = &xhat[nc * plane..(nc + 1) * plane];
        row.iter_mut().zip(xh).for_each(|(d, &v)| *d = gamma[ch] * v + beta[ch]);
    });
    (y, GroupNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<F: Real>(
    gout: &[F],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[F],
    cache: &GroupNormCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cpg = c / groups;
    let plane = h * w;
    let glen = cpg * plane;
    let count = F::lit(glen as f64);
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let go = &gout[off..off + plane];
            let xh = &cache.xhat[off..off + plane];
            dbeta[ch] = dbeta[ch] + go.iter().copied().sum::<F>();
            dgamma[ch] = dgamma[ch] + go.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>();
        }
    }
    let mut dx = vec![F::zero(); gout.len()];
    dx.par_chunks_mut(glen).enumerate().for_each(|(ng, dxg)| {
        let g = ng % groups;
        let off = ng * glen;
        let go = &gout[off..off + glen];
        let xh = &cache.xhat[off..off + glen];
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for (i, (&gv, &xv)) in go.iter().zip(xh).enumerate() {
            let d = gv * gamma[g * cpg + i / plane];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xv;
        }
        mean_d = mean_d / count;
        mean_dx = mean_dx / count;
        let inv = cache.inv_std[ng];
        for (i, out) in dxg.iter_mut().enumerate() {
            let d = go[i] * gamma[g * cpg + i / plane];
            *out = inv * (d - mean_d - xh[i] * mean_dx);
        }
    });
    (dx, dgamma, dbeta)
}

pub(crate) fn upsample2x_forward<F: Real>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let mut out = vec![F::zero(); planes * 4 * h * w];
    out.chunks_mut(4 * h * w).enumerate().for_each(|(p, dst)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    });
    out
}

pub(crate) fn upsample2x_backward<F: Real>(gout: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * 2 * w + xx];
            }
        }
    }
    dx
}
