//! Video manifests, clip sampling, adaptation pools and the synthetic corpus generator.

mod clip;
mod manifest;
mod pool;
pub mod synth;

pub use clip::{
    evenly_spaced_offsets, load_frame, quantize, sample_offset, sample_pair_offsets, save_frame, FrameClip,
    FrameStore,
};
pub use manifest::{frame_file_name, load_manifest, DatasetManifest, Label, ManifestRole, VideoRecord};
pub use pool::{build_adaptation_pool, AdaptationPool, SourceVideo, TargetVideo};
pub use synth::{make_synthetic_dataset, DomainStyle, ForgeryFamily, SyntheticSpec};
