//! Parameter storage, forward contexts and the layer zoo shared by the
//! network modules.

mod layers;
mod params;

pub use layers::{Activation, Conv2d, Conv3d, ConvOpts, ConvTranspose3d, GroupNorm, LayerNorm, Linear, SparseConv3d};
pub(crate) use layers::largest_divisor_at_most;
pub use params::{Ctx, Init, Param, ParamId, ParamStore};
