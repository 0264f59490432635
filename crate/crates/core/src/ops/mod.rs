//! Layer arithmetic on plain tensors: forward kernels and their adjoints.
//! The autodiff tape dispatches into these; they are also usable directly
//! for inference-only paths.

pub mod activation;
pub mod conv;
pub mod flip;
pub mod gemm;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resize;

pub use activation::{
    relu_forward, sigmoid_forward, softmax_channels_forward, softmax_rows_forward,
};
pub use conv::{conv2d_forward, conv_transpose2d_forward};
pub use flip::{flip_plane, flip_tensor, FlipKind};
pub use norm::{BnMode, BN_EPSILON, BN_MOMENTUM};
pub use resize::bilinear_resize_forward;
