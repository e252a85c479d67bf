//! Small neural-network toolkit on top of candle tensors and autograd.

pub mod conv;
pub mod fused;
pub mod layers;
pub mod optim;
pub mod params;

pub use conv::conv2d;
pub use fused::{batch_norm, relu};
pub use layers::{
    log_softmax_channels, normalize_channels, softmax_channels, softmax_last, BatchNorm2d, Conv2d,
    ConvBnRelu, Linear, Mode,
};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use params::{Init, ParamStore, Scope};
