//! Minimal neural-network toolkit on top of the autodiff tape.

mod adam;
mod layers;
mod params;

pub mod init;

pub use adam::Adam;
pub use layers::{Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerLayer};
pub use params::{ParamId, ParamStore, Session};
