//! Differentiable tensor operations.
//!
//! Every op records a backward closure capturing clones of whatever it needs,
//! so the backward pass never re-borrows the tape. Ops whose inputs do not
//! require gradients skip the closure entirely.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, IxDyn, Slice};

use super::{Tape, Var};
use crate::scalar::Scalar;

fn as2<T: Scalar>(a: &ArrayD<T>) -> Array2<T> {
    a.to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected rank-2 tensor")
}

/// Collapse all leading axes so the last axis becomes the column dimension.
fn rows_view<T: Scalar>(a: &ArrayD<T>) -> Array2<T> {
    let cols = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / cols.max(1);
    a.to_owned()
        .into_shape_with_order((rows, cols))
        .expect("standard layout reshape")
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.with2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
            x + y
        });
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(|g| vec![g.clone(), g.clone()]) });
        self.push(out, ng, vec![a.0, b.0], back)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.with2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
            x - y
        });
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(|g| vec![g.clone(), g.mapv(|v| -v)])
        });
        self.push(out, ng, vec![a.0, b.0], back)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let out = self.with2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
            x * y
        });
        let back = ng.then(|| -> super::BackFn<T> {
            let (xa, xb) = self.with2(a, b, |x, y| (x.clone(), y.clone()));
            Box::new(move |g| vec![g * &xb, g * &xa])
        });
        self.push(out, ng, vec![a.0, b.0], back)
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.with(a, |x| x.mapv(|v| -v));
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(|g| vec![g.mapv(|v| -v)]) });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.with(a, |x| x.mapv(|v| v * c));
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(move |g| vec![g.mapv(|v| v * c)]) });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.with(a, |x| x.mapv(|v| v + c));
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(|g| vec![g.clone()]) });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn relu(&self, a: Var) -> Var {
        let (out, mask) = self.with(a, |x| {
            let out = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
            let mask = x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
            (out, mask)
        });
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(move |g| vec![g * &mask]) });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.with(a, |x| {
            x.mapv(|v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
        });
        let ng = self.needs_grad(a);
        let y = out.clone();
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| vec![g * &y.mapv(|v| v * (T::one() - v))])
        });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.with(a, |x| x.mapv(|v| v.tanh()));
        let ng = self.needs_grad(a);
        let y = out.clone();
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| vec![g * &y.mapv(|v| T::one() - v * v)])
        });
        self.push(out, ng, vec![a.0], back)
    }

    /// Clamp to `[lo, hi]`; the gradient passes through only where the input
    /// lies inside the closed interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let (out, mask) = self.with(a, |x| {
            let out = x.mapv(|v| v.max(lo).min(hi));
            let mask = x.mapv(|v| if v >= lo && v <= hi { T::one() } else { T::zero() });
            (out, mask)
        });
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> { Box::new(move |g| vec![g * &mask]) });
        self.push(out, ng, vec![a.0], back)
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&self, a: Var) -> Var {
        self.constant(self.value(a))
    }

    /// Straight-through estimator: value of `q`, gradient of identity on `x`.
    pub fn straight_through(&self, x: Var, q: Var) -> Var {
        let delta = self.sub(q, x);
        let frozen = self.detach(delta);
        self.add(x, frozen)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (out, xa, xb) = self.with2(a, b, |x, y| {
            let x2 = as2(x);
            let y2 = as2(y);
            assert_eq!(x2.ncols(), y2.nrows(), "matmul: inner dims");
            (x2.dot(&y2).into_dyn(), x2, y2)
        });
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g2 = as2(g);
                vec![g2.dot(&xb.t()).into_dyn(), xa.t().dot(&g2).into_dyn()]
            })
        });
        self.push(out, ng, vec![a.0, b.0], back)
    }

    /// `x [R, C] + b [C]`, broadcast over rows.
    pub fn add_rowvec(&self, x: Var, b: Var) -> Var {
        let out = self.with2(x, b, |x, b| {
            let x2 = as2(x);
            let b1 = b.to_owned().into_dimensionality::<ndarray::Ix1>().expect("rank-1 bias");
            assert_eq!(x2.ncols(), b1.len(), "add_rowvec: width mismatch");
            (&x2 + &b1).into_dyn()
        });
        let ng = self.needs_grad(x) || self.needs_grad(b);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })
        });
        self.push(out, ng, vec![x.0, b.0], back)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let out = self.with(a, |x| {
            x.to_owned()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        });
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                vec![g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad")]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let perm_v = perm.to_vec();
        let out = self.with(a, |x| {
            x.view().permuted_axes(IxDyn(&perm_v)).as_standard_layout().to_owned()
        });
        let ng = self.needs_grad(a);
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                vec![g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned()]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape = self.shape(a);
        let out = self.with(a, |x| {
            x.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned()
        });
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(IxDyn(&in_shape));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
                vec![gx]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: empty input");
        let (out, lens) = {
            let views: Vec<ArrayD<T>> = parts.iter().map(|&p| self.value(p)).collect();
            let lens: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            (concatenate(Axis(axis), &view_refs).expect("concat"), lens)
        };
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let mut offs = 0usize;
                let mut out = Vec::with_capacity(lens.len());
                for &l in &lens {
                    out.push(
                        g.slice_axis(Axis(axis), Slice::from(offs..offs + l))
                            .as_standard_layout()
                            .to_owned(),
                    );
                    offs += l;
                }
                out
            })
        });
        self.push(out, ng, parts.iter().map(|p| p.0).collect(), back)
    }

    /// Repeat a `[1, ...]` tensor `n` times along axis 0.
    pub fn broadcast0(&self, a: Var, n: usize) -> Var {
        let in_shape = self.shape(a);
        assert_eq!(in_shape[0], 1, "broadcast0 expects leading axis 1");
        let mut out_shape = in_shape.clone();
        out_shape[0] = n;
        let out = self.with(a, |x| {
            x.broadcast(IxDyn(&out_shape)).expect("broadcast0").to_owned()
        });
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| vec![g.sum_axis(Axis(0)).insert_axis(Axis(0))])
        });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let in_shape = self.shape(a);
        let out = self.with(a, |x| ArrayD::from_elem(IxDyn(&[]), x.sum()));
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&in_shape), gs)]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with(a, |x| x.len());
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f64_c(n as f64))
    }

    /// Mean over axis 0 with an operand-order-independent accumulation: the
    /// values of each lane are sorted by their bit pattern before summing, so
    /// permuting the inputs along axis 0 yields a bit-identical result.
    pub fn group_mean0(&self, a: Var) -> Var {
        let in_shape = self.shape(a);
        let n = in_shape[0];
        let lane = self.with(a, |x| x.len()) / n.max(1);
        let out = self.with(a, |x| {
            let flat = x.as_standard_layout();
            let flat = flat.as_slice().expect("standard layout");
            let inv_n = T::one() / T::from_f64_c(n as f64);
            let mut vals = vec![T::zero(); n];
            let mut out = Vec::with_capacity(lane);
            for m in 0..lane {
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = flat[i * lane + m];
                }
                vals.sort_unstable_by(|a, b| a.total_cmp_c(b));
                let mut s = T::zero();
                for v in &vals {
                    s += *v;
                }
                out.push(s * inv_n);
            }
            let mut shape = in_shape.clone();
            shape[0] = 1;
            ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
        });
        let ng = self.needs_grad(a);
        let inv_n = T::one() / T::from_f64_c(n as f64);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let mut shape = g.shape().to_vec();
                shape[0] = n;
                let scaled = g.mapv(|v| v * inv_n);
                vec![scaled.broadcast(IxDyn(&shape)).expect("group_mean0 grad").to_owned()]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let in_shape = self.shape(a);
        let out2 = self.with(a, |x| {
            let mut r = rows_view(x);
            for mut row in r.rows_mut() {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - mx).exp());
                let s: T = row.iter().copied().sum();
                row.mapv_inplace(|v| v / s);
            }
            r
        });
        let out = out2
            .clone()
            .into_shape_with_order(IxDyn(&in_shape))
            .expect("softmax reshape");
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g2 = rows_view(g);
                let mut gx = Array2::<T>::zeros(g2.raw_dim());
                for ((grow, yrow), mut orow) in
                    g2.rows().into_iter().zip(out2.rows()).zip(gx.rows_mut())
                {
                    let dot: T = grow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum();
                    for ((o, &g), &y) in orow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *o = y * (g - dot);
                    }
                }
                vec![gx.into_shape_with_order(g.raw_dim()).unwrap()]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self, a: Var) -> Var {
        let in_shape = self.shape(a);
        let out2 = self.with(a, |x| {
            let mut r = rows_view(x);
            for mut row in r.rows_mut() {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
                row.mapv_inplace(|v| v - lse);
            }
            r
        });
        let out = out2
            .clone()
            .into_shape_with_order(IxDyn(&in_shape))
            .expect("log_softmax reshape");
        let ng = self.needs_grad(a);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g2 = rows_view(g);
                let mut gx = Array2::<T>::zeros(g2.raw_dim());
                for ((grow, lrow), mut orow) in
                    g2.rows().into_iter().zip(out2.rows()).zip(gx.rows_mut())
                {
                    let gsum: T = grow.iter().copied().sum();
                    for ((o, &g), &l) in orow.iter_mut().zip(grow.iter()).zip(lrow.iter()) {
                        *o = g - l.exp() * gsum;
                    }
                }
                vec![gx.into_shape_with_order(g.raw_dim()).unwrap()]
            })
        });
        self.push(out, ng, vec![a.0], back)
    }

    /// Mean negative log-likelihood of the target class per row of
    /// log-probabilities `[R, K]`.
    pub fn nll_mean(&self, logp: Var, targets: &[usize]) -> Var {
        let (rows, k) = {
            let s = self.shape(logp);
            assert_eq!(s.len(), 2, "nll_mean expects [R, K]");
            (s[0], s[1])
        };
        assert_eq!(rows, targets.len(), "nll_mean: target count");
        let tv = targets.to_vec();
        let out = self.with(logp, |x| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut s = T::zero();
            for (r, &t) in tv.iter().enumerate() {
                assert!(t < k, "nll_mean: target out of range");
                s += x2[[r, t]];
            }
            ArrayD::from_elem(IxDyn(&[]), -s / T::from_f64_c(rows as f64))
        });
        let ng = self.needs_grad(logp);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut gx = Array2::<T>::zeros((rows, k));
                let c = -gs / T::from_f64_c(rows as f64);
                for (r, &t) in tv.iter().enumerate() {
                    gx[[r, t]] = c;
                }
                vec![gx.into_dyn()]
            })
        });
        self.push(out, ng, vec![logp.0], back)
    }

    /// Layer normalization over the last axis with learned affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let in_shape = self.shape(x);
        let c = *in_shape.last().unwrap();
        let (out2, xhat, inv_std, gam) = {
            let nodes_x = self.value(x);
            let gam = self
                .value(gamma)
                .into_dimensionality::<ndarray::Ix1>()
                .expect("layer_norm gamma rank-1");
            let bet = self
                .value(beta)
                .into_dimensionality::<ndarray::Ix1>()
                .expect("layer_norm beta rank-1");
            assert_eq!(gam.len(), c);
            let r = rows_view(&nodes_x);
            let mut xhat = Array2::<T>::zeros(r.raw_dim());
            let mut inv_std = Array1::<T>::zeros(r.nrows());
            let mut out = Array2::<T>::zeros(r.raw_dim());
            let cn = T::from_f64_c(c as f64);
            for (i, row) in r.rows().into_iter().enumerate() {
                let mu = row.iter().copied().sum::<T>() / cn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[i] = is;
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mu) * is;
                    xhat[[i, j]] = h;
                    out[[i, j]] = gam[j] * h + bet[j];
                }
            }
            (out, xhat, inv_std, gam)
        };
        let out = out2.into_shape_with_order(IxDyn(&in_shape)).unwrap();
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g2 = rows_view(g);
                let rows = g2.nrows();
                let cn = T::from_f64_c(xhat.ncols() as f64);
                let mut gx = Array2::<T>::zeros(g2.raw_dim());
                let mut ggamma = Array1::<T>::zeros(xhat.ncols());
                let mut gbeta = Array1::<T>::zeros(xhat.ncols());
                for i in 0..rows {
                    let grow = g2.row(i);
                    let hrow = xhat.row(i);
                    // d/dgamma, d/dbeta accumulate over rows
                    for j in 0..xhat.ncols() {
                        ggamma[j] += grow[j] * hrow[j];
                        gbeta[j] += grow[j];
                    }
                    // dx = inv_std * (gg - mean(gg) - xhat * mean(gg*xhat)),
                    // gg = gamma .* g
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..xhat.ncols() {
                        let gg = gam[j] * grow[j];
                        m1 += gg;
                        m2 += gg * hrow[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for j in 0..xhat.ncols() {
                        let gg = gam[j] * grow[j];
                        gx[[i, j]] = inv_std[i] * (gg - m1 - hrow[j] * m2);
                    }
                }
                vec![
                    gx.into_shape_with_order(g.raw_dim()).unwrap(),
                    ggamma.into_dyn(),
                    gbeta.into_dyn(),
                ]
            })
        });
        self.push(out, ng, vec![x.0, gamma.0, beta.0], back)
    }

    /// Mean binary cross-entropy against a fixed target, with the prediction
    /// clamped to `[eps, 1 - eps]` before the logs.
    pub fn bce_mean(&self, pred: Var, target: &ArrayD<T>, eps: T) -> Var {
        let tgt = target.clone();
        let n = T::from_f64_c(target.len() as f64);
        let (out, p_clamped) = self.with(pred, |p| {
            assert_eq!(p.shape(), tgt.shape(), "bce_mean: shape mismatch");
            let pc = p.mapv(|v| v.max(eps).min(T::one() - eps));
            let mut s = T::zero();
            for (&pv, &yv) in pc.iter().zip(tgt.iter()) {
                s += yv * pv.ln() + (T::one() - yv) * (T::one() - pv).ln();
            }
            (ArrayD::from_elem(IxDyn(&[]), -s / n), pc)
        });
        let ng = self.needs_grad(pred);
        let back = ng.then(|| -> super::BackFn<T> {
            let in_range = self.with(pred, |p| {
                p.mapv(|v| if v >= eps && v <= T::one() - eps { T::one() } else { T::zero() })
            });
            Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut gx = ArrayD::zeros(p_clamped.raw_dim());
                for ((o, (&pv, &yv)), &m) in gx
                    .iter_mut()
                    .zip(p_clamped.iter().zip(tgt.iter()))
                    .zip(in_range.iter())
                {
                    *o = gs * m * (pv - yv) / (pv * (T::one() - pv)) / n;
                }
                vec![gx]
            })
        });
        self.push(out, ng, vec![pred.0], back)
    }

    /// Mean squared error between two tensors (mean over all elements).
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Look up rows of a `[K, D]` codebook by a `[n, hz, wz]` index grid,
    /// producing `[n, D, hz, wz]`. Gradients scatter-add into the codebook.
    pub fn codebook_lookup(&self, codebook: Var, indices: &ndarray::Array3<usize>) -> Var {
        let (k, d) = {
            let s = self.shape(codebook);
            assert_eq!(s.len(), 2, "codebook_lookup expects [K, D]");
            (s[0], s[1])
        };
        let (n, hz, wz) = indices.dim();
        let idx = indices.clone();
        let out = self.with(codebook, |cb| {
            let cb2 = cb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = ndarray::Array4::<T>::zeros((n, d, hz, wz));
            for b in 0..n {
                for i in 0..hz {
                    for j in 0..wz {
                        let code = idx[[b, i, j]];
                        assert!(code < k, "codebook index out of range");
                        for c in 0..d {
                            out[[b, c, i, j]] = cb2[[code, c]];
                        }
                    }
                }
            }
            out.into_dyn()
        });
        let ng = self.needs_grad(codebook);
        let idx2 = indices.clone();
        let back = ng.then(|| -> super::BackFn<T> {
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gcb = Array2::<T>::zeros((k, d));
                for b in 0..n {
                    for i in 0..hz {
                        for j in 0..wz {
                            let code = idx2[[b, i, j]];
                            for c in 0..d {
                                gcb[[code, c]] += g4[[b, c, i, j]];
                            }
                        }
                    }
                }
                vec![gcb.into_dyn()]
            })
        });
        self.push(out, ng, vec![codebook.0], back)
    }
}
