use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::VideoScore;
use crate::data::{evenly_spaced_offsets, DatasetManifest, FrameClip, FrameStore, VideoRecord};
use crate::error::{Error, Result};
use crate::model::{fake_probability, LastModel};
use crate::nn::Real;
use crate::perturb::{apply_perturbation, Perturbation};

/// Default number of evenly spaced clips scored per video.
pub const DEFAULT_EVAL_CLIPS: usize = 4;

/// Seed for the perturbation applied to clip `k` of a video, derived from a
/// base seed and the video id so results do not depend on scoring order.
fn perturbation_rng(base: u64, video_id: &str, k: usize) -> ChaCha8Rng {
    // FNV-1a over the id keeps this stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ h);
    rng.set_stream(k as u64);
    rng
}

/// The clips scored for a video, optionally corrupted.
pub fn evaluation_clips(
    record: &VideoRecord,
    frames: &FrameStore,
    clip_len: usize,
    n_eval_clips: usize,
    perturbation: Option<(Perturbation, u64)>,
) -> Result<Vec<FrameClip>> {
    let offsets = evenly_spaced_offsets(record.frame_count, clip_len, n_eval_clips).map_err(|_| Error::VideoTooShort {
        video_id: record.video_id.clone(),
        frame_count: record.frame_count,
        clip_len,
    })?;
    offsets
        .into_iter()
        .enumerate()
        .map(|(k, offset)| {
            let clip = frames.clip_at(record, offset, clip_len)?;
            match perturbation {
                Some((p, seed)) => apply_perturbation(&clip, p, &mut perturbation_rng(seed, &record.video_id, k)),
                None => Ok(clip),
            }
        })
        .collect()
}

/// Mean fake probability over `n_eval_clips` evenly spaced clips.
pub fn score_video(
    model: &LastModel<f32>,
    record: &VideoRecord,
    frames: &FrameStore,
    n_eval_clips: usize,
    perturbation: Option<(Perturbation, u64)>,
) -> Result<VideoScore> {
    let clips = evaluation_clips(record, frames, model.config.clip_len, n_eval_clips, perturbation)?;
    let clip_scores = clips
        .iter()
        .map(|c| model.logits(c.frames.view()).map(|l| fake_probability(l.view()) as f64))
        .collect::<Result<Vec<_>>>()?;
    VideoScore::from_clips(record.video_id.clone(), record.label, clip_scores)
}

pub fn score_manifest(
    model: &LastModel<f32>,
    manifest: &DatasetManifest,
    frames: &FrameStore,
    n_eval_clips: usize,
    perturbation: Option<(Perturbation, u64)>,
) -> Result<Vec<VideoScore>> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument(format!("evaluation manifest {} is empty", manifest.name)));
    }
    manifest
        .records
        .iter()
        .map(|r| score_video(model, r, frames, n_eval_clips, perturbation))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingLayer {
    /// Transformer output.
    Z,
    /// Adaptive layer output.
    H,
}

impl std::str::FromStr for EmbeddingLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(EmbeddingLayer::Z),
            "h" => Ok(EmbeddingLayer::H),
            other => Err(Error::InvalidArgument(format!("embedding layer must be z or h, got {other:?}"))),
        }
    }
}

/// Per-video embedding: the chosen layer averaged over the evaluation clips.
pub fn video_embedding(
    model: &LastModel<f32>,
    record: &VideoRecord,
    frames: &FrameStore,
    n_eval_clips: usize,
    layer: EmbeddingLayer,
) -> Result<Array1<f32>> {
    let clips = evaluation_clips(record, frames, model.config.clip_len, n_eval_clips, None)?;
    let mut sum = Array1::<f32>::zeros(model.config.token_dim);
    for c in &clips {
        let (_, z) = model.backbone(c.frames.view())?;
        match layer {
            EmbeddingLayer::Z => sum += &z,
            EmbeddingLayer::H => sum += &model.adapt_project(z.view()),
        }
    }
    Ok(sum / clips.len() as f32)
}

/// Writes one tab-separated row per video with a header row:
/// `video_id, label, domain_tag, method_tag, e0 .. e{d-1}`.
pub fn export_embeddings(
    model: &LastModel<f32>,
    manifest: &DatasetManifest,
    frames: &FrameStore,
    layer: EmbeddingLayer,
    n_eval_clips: usize,
    out: &Path,
) -> Result<()> {
    let d = model.config.token_dim;
    let mut text = String::from("video_id\tlabel\tdomain_tag\tmethod_tag");
    for i in 0..d {
        write!(text, "\te{i}").unwrap();
    }
    text.push('\n');
    for r in &manifest.records {
        let e = video_embedding(model, r, frames, n_eval_clips, layer)?;
        write!(
            text,
            "{}\t{}\t{}\t{}",
            r.video_id,
            r.label.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
            r.domain_tag,
            r.method_tag.as_deref().unwrap_or("-")
        )
        .unwrap();
        for v in e.iter() {
            // Shortest round-trip representation keeps files bit-faithful.
            write!(text, "\t{v}").unwrap();
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

/// Grad-CAM over the pooled encoder features `T`: per frame, channel weights
/// are the spatial mean of the gradient of the `target_class` logit, the map
/// is the ReLU of the weighted channel sum, and the clip is scaled so its
/// maximum is 1 (an all-zero map stays zero). Shape `(n, g, g)`.
pub fn saliency_map<T: Real>(model: &LastModel<T>, clip: ArrayView4<T>, target_class: usize) -> Result<Array3<T>> {
    if target_class >= model.config.n_classes {
        return Err(Error::InvalidArgument(format!("target class {target_class} out of range")));
    }
    let trace = model.backbone_traced(clip)?;
    let p = &model.params;
    let mut scratch = p.zeros_like();
    // The logit is linear in h and h is linear in z.
    let d_h = p.classifier.weight.column(target_class).to_owned();
    let d_z = p.adaptive.weight.dot(&d_h);
    let d_tokens = model.transform_backward(&trace.transformer, d_z.view(), &mut scratch);
    let d_features = model.tokenize_backward(trace.features.view(), d_tokens.view(), &mut scratch);
    let (n, g, _, _) = trace.features.dim();
    let mut cam = Array3::<T>::zeros((n, g, g));
    for i in 0..n {
        let grad = d_features.index_axis(Axis(0), i);
        let feat = trace.features.index_axis(Axis(0), i);
        let weights = grad.mean_axis(Axis(0)).expect("rows").mean_axis(Axis(0)).expect("cols");
        for y in 0..g {
            for x in 0..g {
                let v = feat.slice(ndarray::s![y, x, ..]).dot(&weights);
                cam[[i, y, x]] = v.max(T::zero());
            }
        }
    }
    let max = cam.fold(T::zero(), |m, &v| m.max(v));
    if max > T::zero() {
        cam.mapv_inplace(|v| v / max);
    }
    Ok(cam)
}
