//! The fixed differentiable operation set: forward kernels and their adjoints.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod loss;
pub mod resize;

pub use activation::{activate, activate_backward, Activation};
pub use attention::{channel_attention, channel_attention_backward, AttentionParams, REDUCTION_RATIO};
pub use conv::{conv2d, conv2d_backward, conv2d_strided, conv2d_with};
pub use loss::{cross_entropy, cross_entropy_backward};
pub use resize::{bilinear_resize, bilinear_resize_backward};
