//! Latent variable generator branch: VQ-VAE encoder/quantizer/decoder plus
//! the autoregressive prior over code indices, and the extraction of the
//! stochastic feature sequence V.

mod prior;

pub use prior::PixelCnnPrior;

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use crate::config::VqvaeConfig;
use crate::error::{Error, Result};
use crate::nn::{init, Conv2d, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Discrete latent state for a batch: continuous encoder output, quantized
/// vectors, and the selected codebook indices.
#[derive(Debug, Clone)]
pub struct LatentGrid<T: Scalar> {
    /// `[N, D, hz, wz]` (ze)
    pub continuous: Array4<T>,
    /// `[N, D, hz, wz]` (zq); always equals the codebook rows at `indices`.
    pub quantized: Array4<T>,
    /// `[N, hz, wz]` (z)
    pub indices: Array3<usize>,
}

/// On-tape handles produced by one VQ-VAE forward pass.
pub struct VqForward {
    pub ze: Var,
    pub zq: Var,
    /// Straight-through decoder input: value of zq, gradient of identity.
    pub st: Var,
    pub indices: Array3<usize>,
    pub recon: Var,
    /// Decoder tap after the first upsampling stage, `[N, ch0, H/2, W/2]`.
    pub v_tap: Var,
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Var {
        let h = s.tape.relu(self.conv1.forward(s, x));
        let h = self.conv2.forward(s, h);
        s.tape.relu(s.tape.add(x, h))
    }
}

/// VQ-VAE with a 4-fold spatial downsampling (two stride-2 stages).
pub struct VqVae {
    enc_conv1: Conv2d,
    enc_conv2: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_proj: Conv2d,
    pub codebook: ParamId,
    dec_proj: Conv2d,
    dec_res: Vec<ResBlock>,
    dec_conv1: Conv2d,
    dec_conv2: Conv2d,
    /// Learned 1x1 projection of the decoder tap to the V channels. Lives
    /// outside the `vqvae.` freeze prefix so the full stage may tune it.
    v_proj: Conv2d,
    pub k: usize,
    pub d: usize,
    pub cv: usize,
    pub commitment: f64,
}

impl VqVae {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &VqvaeConfig,
        cv: usize,
    ) -> Self {
        let [ch0, ch1] = cfg.channels;
        let enc_conv1 = Conv2d::new(store, rng, "vqvae.encoder.conv1", 3, ch0, 3, 2, 1);
        let enc_conv2 = Conv2d::new(store, rng, "vqvae.encoder.conv2", ch0, ch1, 3, 2, 1);
        let enc_res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("vqvae.encoder.res{i}"), ch1))
            .collect();
        let enc_proj = Conv2d::new(store, rng, "vqvae.encoder.proj", ch1, cfg.codebook_dim, 1, 1, 0);
        let codebook = store.add(
            "vqvae.codebook",
            init::uniform(rng, &[cfg.codebook_size, cfg.codebook_dim], 1.0 / cfg.codebook_size as f64),
        );
        let dec_proj = Conv2d::new(store, rng, "vqvae.decoder.proj", cfg.codebook_dim, ch1, 1, 1, 0);
        let dec_res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, rng, &format!("vqvae.decoder.res{i}"), ch1))
            .collect();
        let dec_conv1 = Conv2d::new(store, rng, "vqvae.decoder.conv1", ch1, ch0, 3, 1, 1);
        let dec_conv2 = Conv2d::new(store, rng, "vqvae.decoder.conv2", ch0, 3, 3, 1, 1);
        let v_proj = Conv2d::new(store, rng, "vproj.conv", ch0, cv, 1, 1, 0);
        VqVae {
            enc_conv1,
            enc_conv2,
            enc_res,
            enc_proj,
            codebook,
            dec_proj,
            dec_res,
            dec_conv1,
            dec_conv2,
            v_proj,
            k: cfg.codebook_size,
            d: cfg.codebook_dim,
            cv,
            commitment: cfg.commitment,
        }
    }

    /// Deterministic encoder: `[N, 3, H, W] -> [N, D, H/4, W/4]`.
    pub fn encode<T: Scalar>(&self, s: &Session<T>, images: Var) -> Var {
        let mut x = s.tape.relu(self.enc_conv1.forward(s, images));
        x = s.tape.relu(self.enc_conv2.forward(s, x));
        for block in &self.enc_res {
            x = block.forward(s, x);
        }
        self.enc_proj.forward(s, x)
    }

    /// Nearest-neighbor quantization with lowest-index tie-break.
    pub fn quantize_indices<T: Scalar>(ze: &Array4<T>, codebook: &Array2<T>) -> Array3<usize> {
        let (n, d, hz, wz) = ze.dim();
        let k = codebook.nrows();
        assert!(k > 0, "empty codebook");
        assert_eq!(codebook.ncols(), d, "codebook dim mismatch");
        let mut idx = Array3::<usize>::zeros((n, hz, wz));
        for b in 0..n {
            for i in 0..hz {
                for j in 0..wz {
                    let mut best = 0usize;
                    let mut best_d = T::infinity();
                    for code in 0..k {
                        let mut dist = T::zero();
                        for c in 0..d {
                            let diff = ze[[b, c, i, j]] - codebook[[code, c]];
                            dist += diff * diff;
                        }
                        if dist < best_d {
                            best_d = dist;
                            best = code;
                        }
                    }
                    idx[[b, i, j]] = best;
                }
            }
        }
        idx
    }

    /// Quantize an on-tape `ze`, returning `(indices, zq, straight-through)`.
    pub fn quantize<T: Scalar>(&self, s: &Session<T>, ze: Var) -> Result<(Array3<usize>, Var, Var)> {
        if self.k == 0 {
            return Err(Error::Contract("empty codebook".into()));
        }
        let ze_val = s
            .tape
            .value(ze)
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Shape("quantize expects [N, D, hz, wz]".into()))?;
        let cb_var = s.p(self.codebook);
        let cb = s
            .tape
            .value(cb_var)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("codebook is [K, D]");
        if ze_val.dim().1 != self.d {
            return Err(Error::Shape(format!(
                "latent dim {} does not match codebook dim {}",
                ze_val.dim().1,
                self.d
            )));
        }
        let indices = Self::quantize_indices(&ze_val, &cb);
        let zq = s.tape.codebook_lookup(cb_var, &indices);
        let st = s.tape.straight_through(ze, zq);
        Ok((indices, zq, st))
    }

    /// Decode quantized latents back to image space; also returns the
    /// intermediate tap used for V extraction.
    pub fn decode<T: Scalar>(&self, s: &Session<T>, zq: Var) -> (Var, Var) {
        let mut x = s.tape.relu(self.dec_proj.forward(s, zq));
        for block in &self.dec_res {
            x = block.forward(s, x);
        }
        // first upsampling stage: H/4 -> H/2; the tap lives here
        let x = s.tape.upsample2x(x);
        let tap = s.tape.relu(self.dec_conv1.forward(s, x));
        // second upsampling stage: H/2 -> H
        let x = s.tape.upsample2x(tap);
        let recon = s.tape.sigmoid(self.dec_conv2.forward(s, x));
        (recon, tap)
    }

    /// Project the decoder tap to the V feature sequence `[N, cv, H/16, W/16]`.
    pub fn v_features<T: Scalar>(&self, s: &Session<T>, v_tap: Var) -> Var {
        let v = self.v_proj.forward(s, v_tap);
        // tap is at H/2; the fusion grid is at H/16
        s.tape.avg_pool2d(v, 8)
    }

    /// One full pass: encode, quantize, decode.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, images: Var) -> Result<VqForward> {
        let ze = self.encode(s, images);
        let (indices, zq, st) = self.quantize(s, ze)?;
        let (recon, v_tap) = self.decode(s, st);
        Ok(VqForward { ze, zq, st, indices, recon, v_tap })
    }

    /// Decode straight from an index grid (test-time sampled path).
    pub fn decode_indices<T: Scalar>(&self, s: &Session<T>, indices: &Array3<usize>) -> (Var, Var) {
        let zq = s.tape.codebook_lookup(s.p(self.codebook), indices);
        self.decode(s, zq)
    }

    /// Materialize the domain-level latent grid from a forward pass.
    pub fn latent_grid<T: Scalar>(&self, s: &Session<T>, fwd: &VqForward) -> LatentGrid<T> {
        LatentGrid {
            continuous: s.tape.value(fwd.ze).into_dimensionality().unwrap(),
            quantized: s.tape.value(fwd.zq).into_dimensionality().unwrap(),
            indices: fwd.indices.clone(),
        }
    }

    /// Three-term VQ-VAE objective. Gradient routing: the reconstruction term
    /// trains encoder and decoder through the straight-through estimator, the
    /// codebook term trains only the codebook, the commitment term only the
    /// encoder.
    pub fn loss<T: Scalar>(
        &self,
        s: &Session<T>,
        images: Var,
        fwd: &VqForward,
    ) -> (Var, VqLossParts) {
        let recon_l = s.tape.mse(fwd.recon, images);
        let codebook_l = s.tape.mse(s.tape.detach(fwd.ze), fwd.zq);
        let commit_l = s.tape.mse(s.tape.detach(fwd.zq), fwd.ze);
        let total = s.tape.add(
            s.tape.add(recon_l, codebook_l),
            s.tape.scale(commit_l, T::from_f64_c(self.commitment)),
        );
        let parts = VqLossParts {
            reconstruction: s.tape.scalar_value(recon_l).to_f64_c(),
            codebook: s.tape.scalar_value(codebook_l).to_f64_c(),
            commitment: s.tape.scalar_value(commit_l).to_f64_c(),
        };
        (total, parts)
    }
}

/// Scalar components of the VQ-VAE loss for logging.
#[derive(Debug, Clone, Copy)]
pub struct VqLossParts {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Standalone evaluation of the three-term objective on plain tensors.
/// `lambda0` must be nonnegative.
pub fn vqvae_loss<T: Scalar>(
    x: &Array4<T>,
    x_rec: &Array4<T>,
    ze: &Array4<T>,
    zq: &Array4<T>,
    lambda0: f64,
) -> Result<(T, [T; 3])> {
    if lambda0 < 0.0 {
        return Err(Error::Contract(format!("lambda0 = {lambda0} must be nonnegative")));
    }
    if x.dim() != x_rec.dim() || ze.dim() != zq.dim() {
        return Err(Error::Shape("vqvae_loss shape mismatch".into()));
    }
    let mse = |a: &Array4<T>, b: &Array4<T>| -> T {
        let mut s = T::zero();
        for (&u, &v) in a.iter().zip(b.iter()) {
            s += (u - v) * (u - v);
        }
        s / T::from_f64_c(a.len() as f64)
    };
    let parts = [mse(x, x_rec), mse(ze, zq), mse(zq, ze)];
    let total = parts[0] + parts[1] + T::from_f64_c(lambda0) * parts[2];
    Ok((total, parts))
}
