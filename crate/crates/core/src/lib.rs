//! From-scratch encoder-decoder network for pixel-wise labelling.
//!
//! Encoders run conv / ReLU / 2x2 max pool and memorize each window's argmax
//! index; decoders upsample by placing values back at those indices and
//! convolve with their own kernels; a bias-free per-pixel soft-max closes the
//! stack. Training is stage-wise L-BFGS on a class-weighted cross-entropy,
//! with LCN preprocessing, transfer variants, evaluation metrics, a feature
//! ablation study, and a synthetic shapes dataset for end-to-end checks.

pub mod ablation;
pub mod data;
pub mod error;
pub mod layers;
pub mod lcn;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod synth;
pub mod tensor;

pub use error::{Result, SegError};
pub use layers::{ConvLayer, PoolIndices, SoftmaxLayer};
pub use lcn::LcnConfig;
pub use model::{receptive_field, ForwardTrace, HeadKind, Network, NetworkConfig};
pub use optim::{LbfgsParams, LossRecord, TrainSchedule, TrainVariant};
pub use tensor::{FlatVector, Tensor4};
