//! Layer kernels with explicit reverse-mode counterparts.
//!
//! Batch reductions always run in a fixed order so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.k, self.k]
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Output positions `[lo, hi)` along one axis whose input index `o*stride + k - pad` lies in `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, spec: &ConvSpec) -> (usize, usize) {
    let first = |bound: usize| -> usize {
        // smallest o with o*stride + k >= bound + pad
        let need = (bound + spec.pad).saturating_sub(k);
        need.div_ceil(spec.stride).min(out)
    };
    (first(0), first(n))
}

/// Unfolds one sample into a `(cin*k*k) x (ho*wo)` patch matrix.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, spec: &ConvSpec, cols: &mut [T]) {
    let (ho, wo) = spec.out_dims(h, w);
    let p = ho * wo;
    let (k, s) = (spec.k, spec.stride);
    for c in 0..spec.cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, ho, ky, spec);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, wo, kx, spec);
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                out[..ylo * wo].fill(T::zero());
                out[yhi * wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ky - spec.pad;
                    let src = &xc[iy * w..(iy + 1) * w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let ix0 = xlo * s + kx - spec.pad;
                        if s == 1 {
                            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                        } else {
                            for (d, v) in dst[xlo..xhi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back, accumulating.
fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, spec: &ConvSpec, dx: &mut [T]) {
    let (ho, wo) = spec.out_dims(h, w);
    let p = ho * wo;
    let (k, s) = (spec.k, spec.stride);
    for c in 0..spec.cin {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, ho, ky, spec);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, wo, kx, spec);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - spec.pad;
                    let dst = &mut dxc[iy * w..(iy + 1) * w];
                    let from = &src[oy * wo + xlo..oy * wo + xhi];
                    let ix0 = xlo * s + kx - spec.pad;
                    if s == 1 {
                        for (d, v) in dst[ix0..ix0 + from.len()].iter_mut().zip(from) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[ix0..].iter_mut().step_by(s).zip(from) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.k == 1 && spec.stride == 1 && spec.pad == 0
}

/// 2-D cross-correlation. `weight` is `(cout, cin, k, k)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, spec: &ConvSpec) -> Tensor<T> {
    assert_eq!(x.c(), spec.cin, "conv input channels");
    assert_eq!(weight.len(), spec.weight_len());
    let (h, w) = (x.h(), x.w());
    let (ho, wo) = spec.out_dims(h, w);
    let p = ho * wo;
    let kk = spec.patch();
    let mut y = Tensor::zeros([x.n(), spec.cout, ho, wo]);
    y.data.par_chunks_mut(spec.cout * p).enumerate().for_each(|(s, ys)| {
        let xs = x.sample(s);
        let owned;
        let cols: &[T] = if is_pointwise(spec) {
            xs
        } else {
            let mut buf = vec![T::zero(); kk * p];
            im2col(xs, h, w, spec, &mut buf);
            owned = buf;
            &owned
        };
        if let Some(b) = bias {
            for (co, row) in ys.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(spec.cout, kk, p, T::one(), weight, kk as isize, 1, cols, p as isize, 1, beta, ys, p as isize, 1);
    });
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

/// Gradients of a convolution given its input and the output gradient.
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, weight: &[T], dy: &Tensor<T>, spec: &ConvSpec, need_dx: bool) -> ConvGrads<T> {
    let (h, w) = (x.h(), x.w());
    let (ho, wo) = spec.out_dims(h, w);
    assert_eq!(dy.shape, [x.n(), spec.cout, ho, wo]);
    let p = ho * wo;
    let kk = spec.patch();
    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..x.n())
        .into_par_iter()
        .map(|s| {
            let xs = x.sample(s);
            let dys = dy.sample(s);
            let owned;
            let cols: &[T] = if is_pointwise(spec) {
                xs
            } else {
                let mut buf = vec![T::zero(); kk * p];
                im2col(xs, h, w, spec, &mut buf);
                owned = buf;
                &owned
            };
            // dW = dy (cout x p) * cols^T (p x kk)
            let mut dw = vec![T::zero(); spec.cout * kk];
            T::gemm(spec.cout, p, kk, T::one(), dys, p as isize, 1, cols, 1, p as isize, T::zero(), &mut dw, kk as isize, 1);
            let db: Vec<T> = dys.chunks(p).map(|r| r.iter().copied().sum()).collect();
            let dx = need_dx.then(|| {
                // dcols = W^T (kk x cout) * dy (cout x p)
                let mut dcols = vec![T::zero(); kk * p];
                T::gemm(kk, spec.cout, p, T::one(), weight, 1, kk as isize, dys, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                if is_pointwise(spec) {
                    dcols
                } else {
                    let mut dxs = vec![T::zero(); spec.cin * h * w];
                    col2im(&dcols, h, w, spec, &mut dxs);
                    dxs
                }
            });
            (dw, db, dx)
        })
        .collect();
    let mut dweight = vec![T::zero(); spec.weight_len()];
    let mut dbias = vec![T::zero(); spec.cout];
    let mut dx_data = need_dx.then(|| Vec::with_capacity(x.data.len()));
    for (dw, db, dxs) in per_sample {
        dweight.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
        dbias.iter_mut().zip(&db).for_each(|(a, b)| *a += *b);
        if let (Some(all), Some(part)) = (dx_data.as_mut(), dxs) {
            all.extend_from_slice(&part);
        }
    }
    ConvGrads { dx: dx_data.map(|d| Tensor::from_vec(x.shape, d)), dweight, dbias }
}

/// Saved state of a training-mode batch-norm call.
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub batch_var: Vec<T>,
}

fn channel_indices(n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |s| {
        let base = (s * c + ch) * plane;
        base..base + plane
    })
}

/// Training-mode batch norm: normalizes each channel with statistics over batch and space.
pub fn batchnorm_forward_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> (Tensor<T>, BnCache<T>) {
    let (n, c, plane) = (x.n(), x.c(), x.plane());
    let count = (n * plane) as f64;
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f64;
            for r in channel_indices(n, c, plane, ch) {
                sum += x.data[r].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for r in channel_indices(n, c, plane, ch) {
                sq += x.data[r].iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>();
            }
            (mean, sq / count)
        })
        .collect();
    let inv_std: Vec<T> = stats.iter().map(|&(_, var)| T::from_f64_lossy(1.0 / (var + eps).sqrt())).collect();
    let mean: Vec<T> = stats.iter().map(|&(m, _)| T::from_f64_lossy(m)).collect();
    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let batch_var = stats.iter().map(|&(_, v)| T::from_f64_lossy(v * unbiased)).collect();

    let mut xhat = Tensor::zeros(x.shape);
    let mut y = Tensor::zeros(x.shape);
    xhat.data.par_chunks_mut(plane).zip(y.data.par_chunks_mut(plane)).zip(x.data.par_chunks(plane)).enumerate().for_each(
        |(idx, ((xh, yy), xx))| {
            let ch = idx % c;
            for ((a, b), &v) in xh.iter_mut().zip(yy.iter_mut()).zip(xx) {
                *a = (v - mean[ch]) * inv_std[ch];
                *b = gamma[ch] * *a + beta[ch];
            }
        },
    );
    (y, BnCache { xhat, inv_std, batch_mean: mean, batch_var })
}

pub fn batchnorm_forward_infer<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: f64) -> Tensor<T> {
    let (c, plane) = (x.c(), x.plane());
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (var[ch] + T::from_f64_lossy(eps)).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape);
    y.data.par_chunks_mut(plane).zip(x.data.par_chunks(plane)).enumerate().for_each(|(idx, (yy, xx))| {
        let ch = idx % c;
        for (o, &v) in yy.iter_mut().zip(xx) {
            *o = (v - mean[ch]) * scale[ch] + beta[ch];
        }
    });
    y
}

/// Returns `(dx, dgamma, dbeta)`, differentiating through the batch statistics.
pub fn batchnorm_backward<T: Scalar>(dy: &Tensor<T>, cache: &BnCache<T>, gamma: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (dy.n(), dy.c(), dy.plane());
    let count = (n * plane) as f64;
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for r in channel_indices(n, c, plane, ch) {
                for (g, xh) in dy.data[r.clone()].iter().zip(&cache.xhat.data[r]) {
                    sdy += g.to_f64_lossy();
                    sdyx += (*g * *xh).to_f64_lossy();
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|s| T::from_f64_lossy(s.0)).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| T::from_f64_lossy(s.1)).collect();
    let mut dx = Tensor::zeros(dy.shape);
    dx.data.par_chunks_mut(plane).zip(dy.data.par_chunks(plane)).zip(cache.xhat.data.par_chunks(plane)).enumerate().for_each(
        |(idx, ((out, g), xh))| {
            let ch = idx % c;
            let k = gamma[ch] * cache.inv_std[ch];
            let mean_dy = T::from_f64_lossy(sums[ch].0 / count);
            let mean_dyx = T::from_f64_lossy(sums[ch].1 / count);
            for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                *o = k * (gv - mean_dy - xv * mean_dyx);
            }
        },
    );
    (dx, dgamma, dbeta)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Backward of leaky ReLU given its input.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > T::zero() { g } else { g * slope }).collect();
    Tensor::from_vec(x.shape, data)
}

/// Nearest-neighbour 2x upsampling along both spatial axes.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h(), x.w());
    let mut y = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
    for (yp, xp) in y.data.chunks_mut(4 * h * w).zip(x.data.chunks(h * w)) {
        for oy in 0..2 * h {
            let src = &xp[(oy / 2) * w..(oy / 2 + 1) * w];
            let dst = &mut yp[oy * 2 * w..(oy + 1) * 2 * w];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h() / 2, dy.w() / 2);
    let mut dx = Tensor::zeros([dy.n(), dy.c(), h, w]);
    for (xp, yp) in dx.data.chunks_mut(h * w).zip(dy.data.chunks(4 * h * w)) {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                xp[(oy / 2) * w + ox / 2] += yp[oy * 2 * w + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for s in 0..a.n() {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec([a.n(), a.c() + b.c(), a.h(), a.w()], data)
}

pub fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let plane = d.plane();
    let cb = d.c() - ca;
    let mut da = Vec::with_capacity(d.n() * ca * plane);
    let mut db = Vec::with_capacity(d.n() * cb * plane);
    for s in 0..d.n() {
        let x = d.sample(s);
        da.extend_from_slice(&x[..ca * plane]);
        db.extend_from_slice(&x[ca * plane..]);
    }
    (Tensor::from_vec([d.n(), ca, d.h(), d.w()], da), Tensor::from_vec([d.n(), cb, d.h(), d.w()], db))
}

/// Zero-pads (or crops) the last axis to `new_w`.
pub fn resize_width<T: Scalar>(x: &Tensor<T>, new_w: usize) -> Tensor<T> {
    let (h, w) = (x.h(), x.w());
    let keep = w.min(new_w);
    let mut y = Tensor::zeros([x.n(), x.c(), h, new_w]);
    for (yr, xr) in y.data.chunks_mut(new_w).zip(x.data.chunks(w)) {
        yr[..keep].copy_from_slice(&xr[..keep]);
    }
    y
}
