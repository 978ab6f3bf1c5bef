//! Convolution kernels on NCHW buffers.
//!
//! Full convolutions lower to gemm through an im2col buffer built one sample
//! at a time. Depthwise convolutions are evaluated directly.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, out: &mut [T]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut out[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let line = &src[oh * g.wo..(oh + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (bs, c, h, wd) = x.dims4();
    let (co, ci, k, _) = w.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let n = g.cols();
    let mut out = Tensor::zeros(&[bs, co, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * n]
    };
    let in_per = c * h * wd;
    let out_per = co * n;
    for s in 0..bs {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let os = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                os[o * n..(o + 1) * n].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(co, g.rows(), n, w.data(), false, xs, false, os, beta);
        } else {
            im2col(xs, &g, &mut cols);
            gemm(co, g.rows(), n, w.data(), false, &cols, false, os, beta);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (bs, c, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let n = g.cols();
    let rows = g.rows();
    let in_per = c * h * wd;
    let out_per = co * n;

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * n }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { rows * n } else { 0 }];

    for s in 0..bs {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let gs = &gout.data()[s * out_per..(s + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += gs[o * n..(o + 1) * n].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            // dW (co x rows) += gout_s (co x n) * cols^T (n x rows)
            if g.is_pointwise() {
                gemm(co, n, rows, gs, false, xs, true, dw.data_mut(), T::one());
            } else {
                im2col(xs, &g, &mut cols);
                gemm(co, n, rows, gs, false, &cols, true, dw.data_mut(), T::one());
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            // dcols (rows x n) = W^T (rows x co) * gout_s (co x n)
            if g.is_pointwise() {
                gemm(rows, co, n, w.data(), true, gs, false, dxs, T::one());
            } else {
                gemm(rows, co, n, w.data(), true, gs, false, &mut dcols, T::zero());
                col2im_add(&dcols, &g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Depthwise convolution, stride 1, `pad = k / 2` ("same" output size).
pub(crate) fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (bs, c, h, wd) = x.dims4();
    let k = w.dim(2);
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let hw = h * wd;
    let od = out.data_mut();
    for s in 0..bs {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let src = &x.data()[base..base + hw];
            let dst = &mut od[base..base + hw];
            if let Some(b) = b {
                dst.fill(b.data()[ch]);
            }
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            for ki in 0..k {
                let di = ki as isize - p;
                let (oh0, oh1) = valid_range(h, di);
                for kj in 0..k {
                    let dj = kj as isize - p;
                    let (ow0, ow1) = valid_range(wd, dj);
                    let wv = kern[ki * k + kj];
                    for oh in oh0..oh1 {
                        let ih = (oh as isize + di) as usize;
                        let srow = &src[ih * wd..(ih + 1) * wd];
                        let drow = &mut dst[oh * wd..(oh + 1) * wd];
                        for ow in ow0..ow1 {
                            drow[ow] += wv * srow[(ow as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `o` in `[0, n)` for which `o + d` is also in range.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (bs, c, h, wd) = x.dims4();
    let k = w.dim(2);
    let p = (k / 2) as isize;
    let hw = h * wd;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[c]));
    for s in 0..bs {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let src = &x.data()[base..base + hw];
            let go = &gout.data()[base..base + hw];
            if let Some(db) = db.as_mut() {
                db.data_mut()[ch] += go.iter().copied().sum::<T>();
            }
            for ki in 0..k {
                let di = ki as isize - p;
                let (oh0, oh1) = valid_range(h, di);
                for kj in 0..k {
                    let dj = kj as isize - p;
                    let (ow0, ow1) = valid_range(wd, dj);
                    let widx = ch * k * k + ki * k + kj;
                    let wv = w.data()[widx];
                    let mut acc = T::zero();
                    for oh in oh0..oh1 {
                        let ih = (oh as isize + di) as usize;
                        let grow = &go[oh * wd..(oh + 1) * wd];
                        if need_dw {
                            let srow = &src[ih * wd..(ih + 1) * wd];
                            for ow in ow0..ow1 {
                                acc += grow[ow] * srow[(ow as isize + dj) as usize];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx.data_mut()[base + ih * wd..base + (ih + 1) * wd];
                            for ow in ow0..ow1 {
                                drow[(ow as isize + dj) as usize] += wv * grow[ow];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (bs, c, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[bs, co, ho, wo]);
        for s in 0..bs {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for a in 0..k {
                                for b in 0..k {
                                    let ih = (i * stride + a) as isize - pad as isize;
                                    let iw = (j * stride + b) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((s * c + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((o * c + ci) * k + a) * k + b];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_reference() {
        let x = ramp(&[2, 3, 7, 6], 0.1);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2)] {
            let w = ramp(&[4, 3, k, k], 0.05);
            let got = conv2d_forward(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} stride={stride}");
        }
    }

    #[test]
    fn depthwise_matches_grouped_reference() {
        let x = ramp(&[2, 3, 5, 4], 0.1);
        let w = ramp(&[3, 1, 3, 3], 0.2);
        let got = depthwise_forward(&x, &w, None);
        for ch in 0..3 {
            // one channel at a time through the full convolution
            let xc: Vec<f64> = (0..2)
                .flat_map(|s| x.data()[(s * 3 + ch) * 20..(s * 3 + ch + 1) * 20].to_vec())
                .collect();
            let xc = Tensor::from_vec(&[2, 1, 5, 4], xc).unwrap();
            let wc = Tensor::from_vec(&[1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let want = naive_conv(&xc, &wc, 1, 1);
            for s in 0..2 {
                let g = &got.data()[(s * 3 + ch) * 20..(s * 3 + ch + 1) * 20];
                let r = &want.data()[s * 20..(s + 1) * 20];
                for (a, b) in g.iter().zip(r) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
