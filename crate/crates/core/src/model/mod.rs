//! The detector network and its parameter bookkeeping.

mod config;
mod network;
mod params;

pub use config::{AdaptiveInit, ModelConfig, Preset};
pub use network::{
    fake_probability, softmax, BackboneTrace, EncoderCache, LastModel, ReconstructorCache,
    TransformerCache,
};
pub use params::{Block, ParamGroup, ParameterStore, Projection, Reconstructor, TrainPhase};
