//! Desk-scale training schedule shared by the behavioural tests and the
//! acceptance runner.

use std::path::Path;

use last_core::adapt::AdaptConfig;
use last_core::data::{DatasetManifest, FrameStore, ManifestRole};
use last_core::model::{LastModel, ModelConfig};
use last_core::pretrain::{pretrain, PretrainConfig, PretrainEpoch};
use last_core::train::stage_rng;

use super::synth;

/// Real-only videos used to initialise the desk backbone.
pub const PRETRAIN_VIDEOS: usize = 40;

pub fn pretrain_config() -> PretrainConfig {
    let mut c = PretrainConfig {
        videos_per_batch: 8,
        epochs: 30,
        ..PretrainConfig::default()
    };
    c.optimizer.lr = 2e-3;
    c
}

pub fn head_config() -> AdaptConfig {
    let mut c = AdaptConfig {
        clips_per_video: 32,
        ..AdaptConfig::default()
    };
    c.optimizer.lr = 2e-2;
    c
}

pub fn real_manifest(dir: &Path, seed: u64) -> DatasetManifest {
    synth(dir, "reals", PRETRAIN_VIDEOS, 24, Vec::new(), seed)
        .with_role(ManifestRole::Pretrain)
        .unwrap()
}

/// A freshly initialised model pretrained on `reals` with the desk schedule.
pub fn pretrained(reals: &DatasetManifest, frames: &FrameStore, seed: u64) -> (LastModel<f32>, Vec<PretrainEpoch>) {
    let mut model = LastModel::<f32>::new(ModelConfig::desk_reduced(), &mut stage_rng(seed, 0)).unwrap();
    let log = pretrain(&mut model, reals, frames, &pretrain_config(), &mut stage_rng(seed, 2)).unwrap();
    (model, log)
}
