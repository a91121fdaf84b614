//! Reverse-mode autodiff engine and the shared-encoder multi-decoder network.

mod checkpoint;
mod graph;
mod kernels;
mod network;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ISNN_MAGIC};
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};
pub use kernels::{conv2d_forward, ConvGeom};
pub use network::{
    argmax_channels, bind_params, forward, BoundParams, ConvLayer, ForwardOutput, Head, InputSource, Mode,
    Network, NetworkSpec, NetworkState, Param, ParamGroup, ParamKind, Predictions, INIT_STD, NORM_EPS,
    NORM_MOMENTUM,
};
pub use tensor::Tensor;
