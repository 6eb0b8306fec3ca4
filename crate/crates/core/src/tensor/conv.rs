//! Spatial ops: 2-D convolution (im2col + GEMM), average pooling and
//! bilinear upsampling. Layout is NCHW throughout.

use ndarray::{Array2, Array4, ArrayD, Axis};

use super::{Tape, Var};
use crate::scalar::Scalar;

fn as4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality::<ndarray::Ix4>().expect("expected rank-4 tensor")
}

/// Unfold `[n, ci, h, w]` into `[n*oh*ow, ci*kh*kw]` patch rows.
fn im2col<T: Scalar>(
    x: &ndarray::ArrayView4<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (n, ci, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((n * oh * ow, ci * kh * kw));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let y0 = (oy * stride) as isize - pad as isize;
                let x0 = (ox * stride) as isize - pad as isize;
                let mut cidx = 0usize;
                for c in 0..ci {
                    for ky in 0..kh {
                        let yy = y0 + ky as isize;
                        for kx in 0..kw {
                            let xx = x0 + kx as isize;
                            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                col[[row, cidx]] = x[[b, c, yy as usize, xx as usize]];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter patch-row gradients back into image space.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<T> {
    let mut x = Array4::<T>::zeros((n, ci, h, w));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let y0 = (oy * stride) as isize - pad as isize;
                let x0 = (ox * stride) as isize - pad as isize;
                let mut cidx = 0usize;
                for c in 0..ci {
                    for ky in 0..kh {
                        let yy = y0 + ky as isize;
                        for kx in 0..kw {
                            let xx = x0 + kx as isize;
                            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                x[[b, c, yy as usize, xx as usize]] += col[[row, cidx]];
                            }
                            cidx += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Interpolation table for one axis of a x2 bilinear upsample
/// (align_corners = false). Weights are 0.25/0.75 so the op is exact in
/// binary floating point.
fn up2_table(len_in: usize) -> Vec<(usize, usize, f64, f64)> {
    let mut t = Vec::with_capacity(len_in * 2);
    for o in 0..len_in * 2 {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let f = src.floor();
        let i0 = f.max(0.0) as usize;
        let w1 = (src - f).clamp(0.0, 1.0);
        let i0c = i0.min(len_in - 1);
        let i1c = (i0 + 1).min(len_in - 1);
        if src < 0.0 {
            t.push((0, 0, 1.0, 0.0));
        } else {
            t.push((i0c, i1c, 1.0 - w1, w1));
        }
    }
    t
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution with bias: `x [n, ci, h, w]`, `w [co, ci, kh, kw]`,
    /// `b [co]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        assert_eq!(xs.len(), 4, "conv2d input must be [n, ci, h, w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [co, ci, kh, kw]");
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, wci, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let col = self.with(x, |xv| im2col(&as4(xv), kh, kw, stride, pad, oh, ow));
        let wflat = self.with(weight, |wv| {
            wv.to_owned().into_shape_with_order((co, ci * kh * kw)).unwrap()
        });
        let bvec = self.with(bias, |bv| {
            bv.to_owned().into_dimensionality::<ndarray::Ix1>().expect("conv2d bias rank-1")
        });
        assert_eq!(bvec.len(), co, "conv2d: bias length");

        // [n*oh*ow, co] -> [n, co, oh, ow]
        let mut out_flat = col.dot(&wflat.t());
        out_flat += &bvec;
        let out = out_flat
            .into_shape_with_order((n, oh, ow, co))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let ng = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g4 = as4(g);
                let gflat = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((n * oh * ow, co))
                    .unwrap();
                let gw = gflat.t().dot(&col);
                let gb = gflat.sum_axis(Axis(0));
                let gcol = gflat.dot(&wflat);
                let gx = col2im(&gcol, n, ci, h, w, kh, kw, stride, pad, oh, ow);
                vec![
                    gx.into_dyn(),
                    gw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
                    gb.into_dyn(),
                ]
            })
        });
        self.push(out, ng, vec![x.0, weight.0, bias.0], back)
    }

    /// Average pooling with a square window and stride equal to the window.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 4, "avg_pool2d input must be [n, c, h, w]");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool2d: size not divisible by window");
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::from_f64_c((k * k) as f64);
        let out = self.with(x, |xv| {
            let x4 = as4(xv);
            let mut out = Array4::<T>::zeros((n, c, oh, ow));
            for b in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = T::zero();
                            for dy in 0..k {
                                for dx in 0..k {
                                    s += x4[[b, ch, oy * k + dy, ox * k + dx]];
                                }
                            }
                            out[[b, ch, oy, ox]] = s * inv;
                        }
                    }
                }
            }
            out.into_dyn()
        });
        let ng = self.needs_grad(x);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g4 = as4(g);
                let mut gx = Array4::<T>::zeros((n, c, h, w));
                for b in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g4[[b, ch, oy, ox]] * inv;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        gx[[b, ch, oy * k + dy, ox * k + dx]] = gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })
        });
        self.push(out, ng, vec![x.0], back)
    }

    /// Bilinear x2 upsampling (align_corners = false).
    pub fn upsample2x(&self, x: Var) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 4, "upsample2x input must be [n, c, h, w]");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ty = up2_table(h);
        let tx = up2_table(w);
        let out = self.with(x, |xv| {
            let x4 = as4(xv);
            let mut out = Array4::<T>::zeros((n, c, 2 * h, 2 * w));
            for b in 0..n {
                for ch in 0..c {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let v = x4[[b, ch, y0, x0]] * T::from_f64_c(wy0 * wx0)
                                + x4[[b, ch, y0, x1]] * T::from_f64_c(wy0 * wx1)
                                + x4[[b, ch, y1, x0]] * T::from_f64_c(wy1 * wx0)
                                + x4[[b, ch, y1, x1]] * T::from_f64_c(wy1 * wx1);
                            out[[b, ch, oy, ox]] = v;
                        }
                    }
                }
            }
            out.into_dyn()
        });
        let ng = self.needs_grad(x);
        let ty2 = ty.clone();
        let tx2 = tx.clone();
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g4 = as4(g);
                let mut gx = Array4::<T>::zeros((n, c, h, w));
                for b in 0..n {
                    for ch in 0..c {
                        for (oy, &(y0, y1, wy0, wy1)) in ty2.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx2.iter().enumerate() {
                                let gv = g4[[b, ch, oy, ox]];
                                gx[[b, ch, y0, x0]] += gv * T::from_f64_c(wy0 * wx0);
                                gx[[b, ch, y0, x1]] += gv * T::from_f64_c(wy0 * wx1);
                                gx[[b, ch, y1, x0]] += gv * T::from_f64_c(wy1 * wx0);
                                gx[[b, ch, y1, x1]] += gv * T::from_f64_c(wy1 * wx1);
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })
        });
        self.push(out, ng, vec![x.0], back)
    }
}
