//! Sensing-driven semantic video transmission.
//!
//! Frames are classified static or dynamic by mask differencing, encoded by
//! a routing-attention extractor and KAN encoder at a class-dependent length,
//! sent over a simulated AWGN or flat-Rayleigh channel, and reconstructed by an
//! attention decoder. Mentor (long) and student (short) codecs are trained
//! jointly with adaptive distillation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bra;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod decoder;
pub mod error;
pub mod frames;
pub mod gradcheck;
pub mod kan;
pub mod metrics;
pub mod osms;
pub mod pipeline;
pub mod plot;
pub mod records;
pub mod synth;
pub mod tape;
pub mod training;

pub use bra::{BraConfig, BraParams, PatchGeometry, RoutingIndex, SemanticRepresentation, TokenLayout};
pub use channel::{ChannelConfig, ChannelRealization, ComplexSymbolVector, Fading};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use codec::{ModelConfig, ModelPair, SemanticCodec};
pub use config::{RunConfig, Scheme};
pub use error::{Error, Result};
pub use frames::{Frame, FrameLabel, VideoSequence};
pub use kan::{CrClass, CrLengths, KanLayer, SemanticEncoding, SplineBasis};
pub use metrics::Psnr;
pub use osms::{BoundingBox, DetectionSet, SensingMask, Sensor};
pub use pipeline::{augment_static_ratio, compute_reduction, run_experiment, run_transmission, PipelineConfig};
pub use records::{Summary, TransmissionRecord};
pub use training::{train, LossHistory, TrainConfig};
