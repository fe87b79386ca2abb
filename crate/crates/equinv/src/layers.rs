//! Forward and backward kernels for the handful of layer types the
//! backbones and heads need. Convolution goes through im2col plus GEMM;
//! every backward consumes the cache its forward produced.

use crate::scalar::Real;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};

pub fn im2col<T: Real>(x: &Array4<T>, k: usize, stride: usize, pad: usize) -> Array3<T> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array3::zeros((b, c * k * k, oh * ow));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = oy * stride + ki;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox * stride + kj;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            cols[[bi, row, oy * ow + ox]] = x[[bi, ci, iy - pad, ix - pad]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &Array3<T>,
    xdim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, c, h, w) = xdim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array4::zeros(xdim);
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = oy * stride + ki;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox * stride + kj;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            let v = cols[[bi, row, oy * ow + ox]];
                            x[[bi, ci, iy - pad, ix - pad]] = x[[bi, ci, iy - pad, ix - pad]] + v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub struct ConvCache<T> {
    cols: Array3<T>,
    xdim: (usize, usize, usize, usize),
}

/// Bias-free convolution, square kernel. Weights are (O, C, k, k).
pub fn conv2d<T: Real>(
    x: &Array4<T>,
    w: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> (Array4<T>, ConvCache<T>) {
    let (b, c, h, wd) = x.dim();
    let o = w.shape()[0];
    let k = w.shape()[2];
    debug_assert_eq!(w.shape()[1], c);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cols = im2col(x, k, stride, pad);
    let wmat = w.to_shape((o, c * k * k)).unwrap();
    let wmat = wmat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut y = Array4::zeros((b, o, oh, ow));
    for bi in 0..b {
        let yb = wmat.dot(&cols.index_axis(Axis(0), bi));
        y.index_axis_mut(Axis(0), bi)
            .assign(&yb.into_shape_with_order((o, oh, ow)).unwrap());
    }
    (y, ConvCache { cols, xdim: (b, c, h, wd) })
}

pub fn conv2d_backward<T: Real>(
    dy: &Array4<T>,
    w: &ArrayD<T>,
    cache: &ConvCache<T>,
    stride: usize,
    pad: usize,
) -> (Array4<T>, ArrayD<T>) {
    let (b, o, oh, ow) = dy.dim();
    let c = cache.xdim.1;
    let k = w.shape()[2];
    let ckk = c * k * k;
    let wmat = w.to_shape((o, ckk)).unwrap();
    let wmat = wmat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut dwmat = Array2::<T>::zeros((o, ckk));
    let mut dcols = Array3::zeros((b, ckk, oh * ow));
    for bi in 0..b {
        let dyb = dy
            .index_axis(Axis(0), bi)
            .to_shape((o, oh * ow))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let colsb = cache.cols.index_axis(Axis(0), bi);
        dwmat = dwmat + dyb.dot(&colsb.t());
        dcols.index_axis_mut(Axis(0), bi).assign(&wmat.t().dot(&dyb));
    }
    let dx = col2im(&dcols, cache.xdim, k, stride, pad);
    let dw = dwmat.into_shape_with_order(w.raw_dim()).unwrap();
    (dx, dw)
}

pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

pub struct BnStats<T> {
    pub mean: Array1<T>,
    pub var_biased: Array1<T>,
    pub count: usize,
}

const BN_EPS: f64 = 1e-5;

/// Batch-statistics normalization over (B, H, W) per channel.
pub fn batchnorm_train<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
) -> (Array4<T>, BnCache<T>, BnStats<T>) {
    let (b, c, h, w) = x.dim();
    let n = T::from_f64((b * h * w) as f64);
    let eps = T::from_f64(BN_EPS);
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    s = s + x[[bi, ci, yi, xi]];
                }
            }
        }
        mean[ci] = s / n;
        let mut v = T::zero();
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let d = x[[bi, ci, yi, xi]] - mean[ci];
                    v = v + d * d;
                }
            }
        }
        var[ci] = v / n;
    }
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut xhat = Array4::zeros((b, c, h, w));
    let mut y = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        let g = gamma[[ci]];
        let bt = beta[[ci]];
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let xh = (x[[bi, ci, yi, xi]] - mean[ci]) * inv_std[ci];
                    xhat[[bi, ci, yi, xi]] = xh;
                    y[[bi, ci, yi, xi]] = g * xh + bt;
                }
            }
        }
    }
    let stats = BnStats { mean, var_biased: var, count: b * h * w };
    (y, BnCache { xhat, inv_std }, stats)
}

pub fn batchnorm_eval<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    run_mean: &ArrayD<T>,
    run_var: &ArrayD<T>,
) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let eps = T::from_f64(BN_EPS);
    let mut y = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        let inv = T::one() / (run_var[[ci]] + eps).sqrt();
        let g = gamma[[ci]];
        let m = run_mean[[ci]];
        let bt = beta[[ci]];
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    y[[bi, ci, yi, xi]] = g * (x[[bi, ci, yi, xi]] - m) * inv + bt;
                }
            }
        }
    }
    y
}

pub fn batchnorm_backward<T: Real>(
    dy: &Array4<T>,
    gamma: &ArrayD<T>,
    cache: &BnCache<T>,
) -> (Array4<T>, ArrayD<T>, ArrayD<T>) {
    let (b, c, h, w) = dy.dim();
    let n = T::from_f64((b * h * w) as f64);
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let mut dg = T::zero();
        let mut db = T::zero();
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    dg = dg + dy[[bi, ci, yi, xi]] * cache.xhat[[bi, ci, yi, xi]];
                    db = db + dy[[bi, ci, yi, xi]];
                }
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }
    let mut dx = Array4::zeros((b, c, h, w));
    for ci in 0..c {
        let scale = gamma[[ci]] * cache.inv_std[ci];
        let mg = dgamma[ci] / n;
        let mb = dbeta[ci] / n;
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let term = dy[[bi, ci, yi, xi]] - mb - cache.xhat[[bi, ci, yi, xi]] * mg;
                    dx[[bi, ci, yi, xi]] = scale * term;
                }
            }
        }
    }
    (dx, dgamma.into_dyn(), dbeta.into_dyn())
}

pub fn relu4<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu4_backward<T: Real>(dy: &Array4<T>, x: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn relu2<T: Real>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu2_backward<T: Real>(dy: &Array2<T>, x: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub struct PoolCache {
    argmax: Array4<usize>,
    xdim: (usize, usize, usize, usize),
}

/// 2x2 max pooling, stride 2, floor semantics; ties go to the first cell
/// in scan order.
pub fn maxpool2<T: Real>(x: &Array4<T>) -> (Array4<T>, PoolCache) {
    let (b, c, h, w) = x.dim();
    let oh = h / 2;
    let ow = w / 2;
    let mut y = Array4::zeros((b, c, oh, ow));
    let mut argmax = Array4::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[[bi, ci, 2 * oy, 2 * ox]];
                    let mut bidx = 2 * oy * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[bi, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                bidx = (2 * oy + dy) * w + 2 * ox + dx;
                            }
                        }
                    }
                    y[[bi, ci, oy, ox]] = best;
                    argmax[[bi, ci, oy, ox]] = bidx;
                }
            }
        }
    }
    (y, PoolCache { argmax, xdim: (b, c, h, w) })
}

pub fn maxpool2_backward<T: Real>(dy: &Array4<T>, cache: &PoolCache) -> Array4<T> {
    let (b, c, oh, ow) = dy.dim();
    let w = cache.xdim.3;
    let mut dx = Array4::zeros(cache.xdim);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = cache.argmax[[bi, ci, oy, ox]];
                    let (iy, ix) = (idx / w, idx % w);
                    dx[[bi, ci, iy, ix]] = dx[[bi, ci, iy, ix]] + dy[[bi, ci, oy, ox]];
                }
            }
        }
    }
    dx
}

pub fn gap<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let n = T::from_f64((h * w) as f64);
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = T::zero();
            for yi in 0..h {
                for xi in 0..w {
                    s = s + x[[bi, ci, yi, xi]];
                }
            }
            y[[bi, ci]] = s / n;
        }
    }
    y
}

pub fn gap_backward<T: Real>(dy: &Array2<T>, xdim: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, c, h, w) = xdim;
    let n = T::from_f64((h * w) as f64);
    let mut dx = Array4::zeros(xdim);
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] / n;
            for yi in 0..h {
                for xi in 0..w {
                    dx[[bi, ci, yi, xi]] = g;
                }
            }
        }
    }
    dx
}

/// y = x W^T + b with W of shape (out, in).
pub fn linear<T: Real>(x: &Array2<T>, w: &ArrayD<T>, b: &ArrayD<T>) -> Array2<T> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wmat = w.to_shape((out, inp)).unwrap();
    let wmat = wmat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut y = x.dot(&wmat.t());
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v + b[[j]];
        }
    }
    y
}

pub fn linear_backward<T: Real>(
    x: &Array2<T>,
    w: &ArrayD<T>,
    dy: &Array2<T>,
) -> (Array2<T>, ArrayD<T>, ArrayD<T>) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wmat = w.to_shape((out, inp)).unwrap();
    let wmat = wmat.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    let dx = dy.dot(&wmat);
    (dx, dw.into_dyn(), db.into_dyn())
}

pub struct NormCache<T> {
    y: Array2<T>,
    inv_norm: Array1<T>,
}

const NORM_GUARD: f64 = 1e-24;

/// Row-wise y = x / sqrt(|x|^2 + guard); the guard keeps the all-zero row
/// finite and the gradient exact: dx = (dy - y (y.dy)) / n.
pub fn l2norm_rows<T: Real>(x: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    let (n, d) = x.dim();
    let guard = T::from_f64(NORM_GUARD);
    let mut y = Array2::zeros((n, d));
    let mut inv_norm = Array1::zeros(n);
    for i in 0..n {
        let mut s = T::zero();
        for j in 0..d {
            s = s + x[[i, j]] * x[[i, j]];
        }
        let inv = T::one() / (s + guard).sqrt();
        inv_norm[i] = inv;
        for j in 0..d {
            y[[i, j]] = x[[i, j]] * inv;
        }
    }
    let cache = NormCache { y: y.clone(), inv_norm };
    (y, cache)
}

pub fn l2norm_rows_backward<T: Real>(dy: &Array2<T>, cache: &NormCache<T>) -> Array2<T> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut proj = T::zero();
        for j in 0..d {
            proj = proj + cache.y[[i, j]] * dy[[i, j]];
        }
        for j in 0..d {
            dx[[i, j]] = (dy[[i, j]] - cache.y[[i, j]] * proj) * cache.inv_norm[i];
        }
    }
    dx
}
