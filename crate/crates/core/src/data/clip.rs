use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::Rng;

use super::manifest::VideoRecord;
use crate::error::{Error, Result};

/// `n` consecutive frames of one video, `(n, H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    pub video_id: String,
    pub offset: usize,
    pub frames: Array4<f32>,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_unit_range(&self) -> bool {
        self.frames.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Uniform offset in `[0, frame_count - n]`.
pub fn sample_offset<R: Rng + ?Sized>(frame_count: usize, n: usize, rng: &mut R) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    if frame_count < n {
        return Err(Error::InvalidArgument(format!(
            "video has {frame_count} frames, too short for clip length {n}"
        )));
    }
    Ok(rng.random_range(0..=frame_count - n))
}

/// Two distinct offsets for a positive pair.
pub fn sample_pair_offsets<R: Rng + ?Sized>(frame_count: usize, n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    if frame_count < n + 1 {
        return Err(Error::InvalidArgument(format!(
            "video has {frame_count} frames, too short for two distinct clips of length {n}"
        )));
    }
    let valid = frame_count - n + 1;
    let a = rng.random_range(0..valid);
    let b = (a + rng.random_range(1..valid)) % valid;
    Ok((a, b))
}

/// `count` evenly spaced offsets covering the video (used for deterministic scoring).
pub fn evenly_spaced_offsets(frame_count: usize, n: usize, count: usize) -> Result<Vec<usize>> {
    if n == 0 || count == 0 {
        return Err(Error::InvalidArgument("clip length and clip count must be positive".into()));
    }
    if frame_count < n {
        return Err(Error::InvalidArgument(format!(
            "video has {frame_count} frames, too short for clip length {n}"
        )));
    }
    let span = frame_count - n;
    if count == 1 {
        return Ok(vec![span / 2]);
    }
    Ok((0..count)
        .map(|k| ((k * span) as f64 / (count - 1) as f64).round() as usize)
        .collect())
}

pub fn load_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

pub fn save_frame(frame: ArrayView3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = frame.dim();
    let bytes: Vec<u8> = frame.iter().map(|&v| quantize(v)).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("rgb buffer");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decoded frames, cached per video directory.
///
/// Shared between workers; each sampler brings its own RNG.
#[derive(Debug, Default)]
pub struct FrameStore {
    cache: Mutex<HashMap<PathBuf, Arc<Array4<f32>>>>,
}

impl FrameStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// All frames of a video, `(frame_count, H, W, 3)`.
    pub fn video(&self, record: &VideoRecord) -> Result<Arc<Array4<f32>>> {
        if let Some(v) = self.cache.lock().expect("frame cache lock").get(&record.frames_path) {
            return Ok(Arc::clone(v));
        }
        let mut frames = Vec::with_capacity(record.frame_count);
        for i in 0..record.frame_count {
            frames.push(load_frame(&record.frame_path(i))?);
        }
        let (h, w, _) = frames[0].dim();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != (h, w, 3)) {
            return Err(Error::Shape(format!(
                "frame {i} of {} is {:?}, first frame is {:?}",
                record.video_id,
                f.dim(),
                (h, w, 3)
            )));
        }
        let mut video = Array4::<f32>::zeros((record.frame_count, h, w, 3));
        for (i, f) in frames.into_iter().enumerate() {
            video.slice_mut(s![i, .., .., ..]).assign(&f);
        }
        let video = Arc::new(video);
        self.cache
            .lock()
            .expect("frame cache lock")
            .insert(record.frames_path.clone(), Arc::clone(&video));
        Ok(video)
    }

    pub fn clip_at(&self, record: &VideoRecord, offset: usize, n: usize) -> Result<FrameClip> {
        if n == 0 {
            return Err(Error::InvalidArgument("clip length must be positive".into()));
        }
        if offset + n > record.frame_count {
            return Err(Error::VideoTooShort {
                video_id: record.video_id.clone(),
                frame_count: record.frame_count,
                clip_len: offset + n,
            });
        }
        let video = self.video(record)?;
        Ok(FrameClip {
            video_id: record.video_id.clone(),
            offset,
            frames: video.slice(s![offset..offset + n, .., .., ..]).to_owned(),
        })
    }

    /// A clip of `n` consecutive frames from a uniformly random offset.
    pub fn sample_clip<R: Rng + ?Sized>(&self, record: &VideoRecord, n: usize, rng: &mut R) -> Result<FrameClip> {
        let offset = sample_offset(record.frame_count, n, rng)?;
        self.clip_at(record, offset, n)
    }

    /// Two clips of the same video at different offsets.
    pub fn sample_positive_pair<R: Rng + ?Sized>(
        &self,
        record: &VideoRecord,
        n: usize,
        rng: &mut R,
    ) -> Result<(FrameClip, FrameClip)> {
        let (a, b) = sample_pair_offsets(record.frame_count, n, rng)?;
        Ok((self.clip_at(record, a, n)?, self.clip_at(record, b, n)?))
    }
}
