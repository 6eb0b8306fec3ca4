//! Reusable layers. Layers hold [`ParamId`]s only; values live in the
//! [`ParamStore`] and are bound per step through a [`Session`].

use rand_chacha::ChaCha8Rng;

use super::init;
use super::params::{ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init::he_normal(rng, &[in_dim, out_dim], in_dim));
        let b = store.add(format!("{name}.bias"), init::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// `x [R, in] -> [R, out]`
    pub fn forward2d<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let y = s.tape.matmul(x, s.p(self.w));
        s.tape.add_rowvec(y, s.p(self.b))
    }

    /// `x [N, L, in] -> [N, L, out]` (rows processed independently).
    pub fn forward_tokens<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let shape = s.tape.shape(x);
        let (n, l) = (shape[0], shape[1]);
        let flat = s.tape.reshape(x, &[n * l, self.in_dim]);
        let y = self.forward2d(s, flat);
        s.tape.reshape(y, &[n, l, self.out_dim])
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), init::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), init::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        s.tape.layer_norm(x, s.p(self.gamma), s.p(self.beta), T::from_f64_c(1e-5))
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward_tokens<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let h = self.fc1.forward_tokens(s, x);
        let h = s.tape.relu(h);
        self.fc2.forward_tokens(s, h)
    }
}

/// Multi-head self-attention over each image's token sequence. Images in the
/// batch never attend to each other here; cross-image flow happens only
/// through the shared group token.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "attention width must divide head count");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    /// `x [N, L, c] -> [N, L, c]`
    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let shape = s.tape.shape(x);
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.dim);
        let dh = c / self.heads;
        let scale = T::from_f64_c(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward_tokens(s, x);
        let k = self.wk.forward_tokens(s, x);
        let v = self.wv.forward_tokens(s, x);

        let mut per_image = Vec::with_capacity(n);
        for i in 0..n {
            let qi = s.tape.reshape(s.tape.narrow(q, 0, i, 1), &[l, c]);
            let ki = s.tape.reshape(s.tape.narrow(k, 0, i, 1), &[l, c]);
            let vi = s.tape.reshape(s.tape.narrow(v, 0, i, 1), &[l, c]);
            let mut head_outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = s.tape.narrow(qi, 1, h * dh, dh);
                let kh = s.tape.narrow(ki, 1, h * dh, dh);
                let vh = s.tape.narrow(vi, 1, h * dh, dh);
                let kt = s.tape.permute(kh, &[1, 0]);
                let scores = s.tape.scale(s.tape.matmul(qh, kt), scale);
                let attn = s.tape.softmax_last(scores);
                head_outs.push(s.tape.matmul(attn, vh));
            }
            let merged = s.tape.concat(1, &head_outs);
            let proj = self.wo.forward2d(s, merged);
            per_image.push(s.tape.reshape(proj, &[1, l, c]));
        }
        s.tape.concat(0, &per_image)
    }
}

/// Pre-norm transformer encoder block.
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let h = self.attn.forward(s, self.ln1.forward(s, x));
        let x = s.tape.add(x, h);
        let h = self.mlp.forward_tokens(s, self.ln2.forward(s, x));
        s.tape.add(x, h)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = ci * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            init::he_normal(rng, &[co, ci, kernel, kernel], fan_in),
        );
        let b = store.add(format!("{name}.bias"), init::zeros(&[co]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        s.tape.conv2d(x, s.p(self.w), s.p(self.b), self.stride, self.pad)
    }
}
