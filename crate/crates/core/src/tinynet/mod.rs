//! A small differentiable detector: down-sampling convolutions, a dilated
//! convolution block, a deconvolution with an additive skip connection and a
//! multi-default-box head, with hand-written reverse-mode gradients.

pub mod adam;
pub mod anchors;
pub mod layers;
pub mod net;
pub mod snapshot;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use anchors::{decode, default_boxes, encode, AnchorConfig};
pub use layers::{
    build_dilated_block, conv2d_forward, deconv_skip_forward, dilate_kernel, dilated_conv_forward,
    DilatedBlock, Kernel,
};
pub use net::{
    backward, decode_detections, detect, forward, forward_cached, DecodeConfig, ForwardCache,
    HeadOutput, NetConfig, NetworkParams,
};
