//! Minimal dense layers with hand-written backward passes.
//!
//! Everything is channel-last and row-major: a batch of positions is a
//! matrix whose rows are positions and whose columns are channels. Each
//! layer exposes a `forward` that returns the output plus whatever the
//! backward pass needs, and a `backward` that accumulates parameter
//! gradients and returns the gradient with respect to its input.

mod layers;
mod optim;

pub use layers::{
    adaptive_avg_pool, adaptive_avg_pool_backward, col2im3x3, conv_out_size, gelu, gelu_grad,
    im2col3x3, softmax_rows, Attention, AttentionCache, Conv3x3, Conv3x3Cache, LayerNorm,
    LayerNormCache, Linear, Mlp, MlpCache,
};
pub(crate) use layers::{trunc_normal, TensorMuts, TensorRefs};
pub use optim::{Adam, AdamConfig, WarmupSchedule};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage precision tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type used by the network (`f32` for training,
/// `f64` for gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits in the float type")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
