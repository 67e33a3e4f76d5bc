//! Instance-adaptive neural image compression with dynamically gated
//! low-rank decoder updates.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod adapt;
pub mod adapters;
pub mod bitstream;
pub mod codec;
pub mod delta_prior;
pub mod error;
pub mod eval;
pub mod gate;
pub mod image;
pub mod onestep;
pub mod optim;
pub mod scalar;
pub mod tensor;

mod wire;

pub use adapt::{adapt_decoder, end_to_end_encode, refine_latent, AdaptationConfig, AdaptationResult, GateMode};
pub use adapters::{count_params, make_low_rank, AdapterKind, LayerShape, LayerUpdate};
pub use bitstream::{pack, unpack, CompressedBlob};
pub use codec::{CodecConfig, CodecModel, LatentCode};
pub use delta_prior::{DeltaPriorConfig, QuantizedDelta};
pub use error::{Error, Result};
pub use gate::{GateNetwork, GateVector};
pub use eval::{bd_rate, psnr, RDCurve, RDPoint};
pub use image::ImageTensor;
pub use onestep::{build_bank, onestep_encode, ClusterBank, OneStepConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type CodecModel32 = CodecModel<f32>;
pub type CodecModel64 = CodecModel<f64>;
pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Latent32 = LatentCode<f32>;
pub type Latent64 = LatentCode<f64>;
