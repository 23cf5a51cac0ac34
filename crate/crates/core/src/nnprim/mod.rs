//! Neural primitives with hand-written backward passes.
//!
//! Every heavier module (encoder, decoder, probe) is composed from the
//! functions here. Tensors are row-major `[rows, width]` matrices of `f64`;
//! gains and biases are stored as `[1, width]` rows so every parameter shares
//! one type.

mod block;
mod gradcheck;
mod ops;
mod params;

pub use block::{block_backward, block_forward, transformer_block, BlockCache, BlockParams};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{
    cross_entropy_rows, masked_mha, masked_mha_backward, masked_mha_forward, rms_norm,
    rms_norm_backward, silu, swiglu_backward, swiglu_ffn,
};
pub(crate) use params::join as params_join;
pub use params::normal_mat;
pub use params::{param_checksum, zeros_like, Linear, ParamEntry, ParamSet, ParamTree};

/// Dense row-major matrix used for activations, parameters and gradients.
pub type Mat = ndarray::Array2<f64>;

/// RMSNorm epsilon used by every normalization layer.
pub const NORM_EPS: f64 = 1e-6;

pub(crate) fn check_finite(name: &str, m: &Mat) -> crate::Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(name.to_string()))
    }
}
