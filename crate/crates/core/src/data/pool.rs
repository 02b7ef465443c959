use std::path::PathBuf;

use rand::seq::index::sample;
use rand::Rng;
use tracing::warn;

use super::clip::{FrameClip, FrameStore};
use super::manifest::{DatasetManifest, Label, VideoRecord};
use crate::error::{Error, Result};

/// A labelled source video.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceVideo {
    pub record: VideoRecord,
    pub label: Label,
}

/// An unlabelled target video. Carries no label field at all, so nothing
/// downstream of the pool can read one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVideo {
    pub video_id: String,
    pub frames_path: PathBuf,
    pub domain_tag: String,
    pub frame_count: usize,
}

impl TargetVideo {
    fn from_record(r: &VideoRecord) -> Self {
        Self {
            video_id: r.video_id.clone(),
            frames_path: r.frames_path.clone(),
            domain_tag: r.domain_tag.clone(),
            frame_count: r.frame_count,
        }
    }

    fn as_record(&self) -> VideoRecord {
        VideoRecord {
            video_id: self.video_id.clone(),
            frames_path: self.frames_path.clone(),
            label: None,
            domain_tag: self.domain_tag.clone(),
            method_tag: None,
            frame_count: self.frame_count,
        }
    }
}

/// Labelled source videos plus a label-free subset of target videos.
#[derive(Debug, Clone)]
pub struct AdaptationPool {
    source: Vec<SourceVideo>,
    target: Vec<TargetVideo>,
    pub target_ratio: f64,
    /// True when the target manifest had fewer videos than requested.
    pub capped: bool,
}

/// Selects `ceil(target_ratio * |source|)` target videos (capped at the
/// target size) without replacement and strips their labels.
pub fn build_adaptation_pool<R: Rng + ?Sized>(
    source: &DatasetManifest,
    target: &DatasetManifest,
    target_ratio: f64,
    rng: &mut R,
) -> Result<AdaptationPool> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target_ratio must lie in (0, 1], got {target_ratio}"
        )));
    }
    if source.is_empty() {
        return Err(Error::InvalidArgument("source manifest is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidArgument("target manifest is empty".into()));
    }
    let source_videos = source
        .records
        .iter()
        .map(|r| {
            r.label
                .map(|label| SourceVideo {
                    record: r.clone(),
                    label,
                })
                .ok_or_else(|| Error::InvalidManifest(format!("source video {} has no label", r.video_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let wanted = (target_ratio * source.len() as f64).ceil() as usize;
    let capped = wanted > target.len();
    if capped {
        warn!(
            wanted,
            available = target.len(),
            "target manifest smaller than requested pool; using every target video"
        );
    }
    let take = wanted.min(target.len()).max(1);
    let mut picked = sample(rng, target.len(), take).into_vec();
    picked.sort_unstable();
    let target_videos = picked
        .into_iter()
        .map(|i| TargetVideo::from_record(&target.records[i]))
        .collect();
    Ok(AdaptationPool {
        source: source_videos,
        target: target_videos,
        target_ratio,
        capped,
    })
}

impl AdaptationPool {
    pub fn source(&self) -> &[SourceVideo] {
        &self.source
    }

    pub fn target(&self) -> &[TargetVideo] {
        &self.target
    }

    /// Pool with no target side, for source-only training.
    pub fn source_only(source: &DatasetManifest) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("source manifest is empty".into()));
        }
        let source = source
            .records
            .iter()
            .map(|r| {
                r.label
                    .map(|label| SourceVideo {
                        record: r.clone(),
                        label,
                    })
                    .ok_or_else(|| Error::InvalidManifest(format!("source video {} has no label", r.video_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source,
            target: Vec::new(),
            target_ratio: 0.0,
            capped: false,
        })
    }

    /// A clip from a random offset of target video `index`.
    pub fn target_clip<R: Rng + ?Sized>(&self, store: &FrameStore, index: usize, n: usize, rng: &mut R) -> Result<FrameClip> {
        store.sample_clip(&self.target[index].as_record(), n, rng)
    }

    pub fn target_clip_at(&self, store: &FrameStore, index: usize, offset: usize, n: usize) -> Result<FrameClip> {
        store.clip_at(&self.target[index].as_record(), offset, n)
    }

    pub fn source_clip_at(&self, store: &FrameStore, index: usize, offset: usize, n: usize) -> Result<(FrameClip, Label)> {
        let v = &self.source[index];
        Ok((store.clip_at(&v.record, offset, n)?, v.label))
    }
}
