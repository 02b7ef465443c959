//! Seven corruption families at five severity levels for robustness evaluation.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageDecoder, RgbImage};
use ndarray::{s, Array3, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{quantize, FrameClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Saturation,
    Contrast,
    Block,
    Noise,
    Blur,
    Pixel,
    Compress,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::Saturation,
        PerturbationKind::Contrast,
        PerturbationKind::Block,
        PerturbationKind::Noise,
        PerturbationKind::Blur,
        PerturbationKind::Pixel,
        PerturbationKind::Compress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Block => "block",
            PerturbationKind::Noise => "noise",
            PerturbationKind::Blur => "blur",
            PerturbationKind::Pixel => "pixel",
            PerturbationKind::Compress => "compress",
        }
    }

    /// Corruption parameter for severities 1 through 5.
    ///
    /// saturation: HSV saturation scale; contrast: factor about mid-gray;
    /// block: squares per frame; noise: Gaussian sigma; blur: kernel sigma in
    /// pixels; pixel: downscale factor; compress: JPEG quality.
    pub fn table(self) -> [f64; 5] {
        match self {
            PerturbationKind::Saturation => [1.15, 1.3, 1.6, 2.0, 3.0],
            PerturbationKind::Contrast => [0.85, 0.7, 0.55, 0.4, 0.3],
            PerturbationKind::Block => [2.0, 4.0, 8.0, 12.0, 16.0],
            PerturbationKind::Noise => [0.02, 0.04, 0.06, 0.1, 0.15],
            PerturbationKind::Blur => [1.0, 2.0, 3.0, 5.0, 7.0],
            PerturbationKind::Pixel => [2.0, 3.0, 4.0, 6.0, 8.0],
            PerturbationKind::Compress => [90.0, 70.0, 50.0, 35.0, 20.0],
        }
    }

    /// +1 when the parameter grows with severity, -1 when it shrinks.
    pub fn severity_direction(self) -> f64 {
        match self {
            PerturbationKind::Contrast | PerturbationKind::Compress => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    severity: u8,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    pub fn parameter(&self) -> f64 {
        self.kind.table()[self.severity as usize - 1]
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

/// Parses `kind:severity`, e.g. `noise:3`.
impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, sev) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("perturbation {s:?} is not of the form kind:severity")))?;
        let sev: u8 = sev
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("severity {sev:?} is not an integer")))?;
        Perturbation::new(kind.trim().parse()?, sev)
    }
}

/// All 35 perturbations, kind-major in [`PerturbationKind::ALL`] order, severity 1..=5.
pub fn perturbation_grid() -> Vec<Perturbation> {
    PerturbationKind::ALL
        .into_iter()
        .flat_map(|kind| (1..=5).map(move |severity| Perturbation { kind, severity }))
        .collect()
}

/// Side of a black square for the block corruption: 32 px at 224, scaled with the frame.
pub fn block_side(image_size: usize) -> usize {
    ((32 * image_size) as f64 / 224.0).round().max(1.0) as usize
}

pub fn apply_perturbation<R: Rng + ?Sized>(clip: &FrameClip, p: Perturbation, rng: &mut R) -> Result<FrameClip> {
    let mut frames = clip.frames.clone();
    let (_, h, w, c) = frames.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB frames, got {c} channels")));
    }
    let param = p.parameter();
    match p.kind {
        PerturbationKind::Saturation => {
            for mut px in frames.lanes_mut(Axis(3)) {
                let (r, g, b) = scale_saturation(px[0], px[1], px[2], param as f32);
                px[0] = r;
                px[1] = g;
                px[2] = b;
            }
        }
        PerturbationKind::Contrast => {
            let f = param as f32;
            frames.mapv_inplace(|v| 0.5 + f * (v - 0.5));
        }
        PerturbationKind::Block => {
            let side = block_side(h.min(w)).min(h).min(w);
            let squares: Vec<(usize, usize)> = (0..param as usize)
                .map(|_| (rng.random_range(0..=h - side), rng.random_range(0..=w - side)))
                .collect();
            for mut frame in frames.outer_iter_mut() {
                for &(y, x) in &squares {
                    frame.slice_mut(s![y..y + side, x..x + side, ..]).fill(0.0);
                }
            }
        }
        PerturbationKind::Noise => add_gaussian_noise(frames.view_mut().into_dyn(), param as f32, rng),
        PerturbationKind::Blur => {
            for mut frame in frames.outer_iter_mut() {
                gaussian_blur(frame.view_mut(), param);
            }
        }
        PerturbationKind::Pixel => {
            for mut frame in frames.outer_iter_mut() {
                pixelate(frame.view_mut(), param as usize);
            }
        }
        PerturbationKind::Compress => {
            for mut frame in frames.outer_iter_mut() {
                let out = jpeg_roundtrip(frame.view(), param as u8)?;
                frame.assign(&out);
            }
        }
    }
    frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(FrameClip {
        video_id: clip.video_id.clone(),
        offset: clip.offset,
        frames,
    })
}

/// Scales HSV saturation by `f` while keeping hue and value.
fn scale_saturation(r: f32, g: f32, b: f32, f: f32) -> (f32, f32, f32) {
    let v = r.max(g).max(b);
    let min = r.min(g).min(b);
    if v <= 0.0 || v == min {
        return (r, g, b);
    }
    let sat = (v - min) / v;
    let ratio = (sat * f).min(1.0) / sat;
    (v - (v - r) * ratio, v - (v - g) * ratio, v - (v - b) * ratio)
}

pub(crate) fn add_gaussian_noise<R: Rng + ?Sized>(mut x: ndarray::ArrayViewMutD<f32>, sigma: f32, rng: &mut R) {
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    x.iter_mut().for_each(|v| *v += normal.sample(rng));
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(mut frame: ArrayViewMut3<f32>, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w, c) = frame.dim();
    let src = frame.to_owned();
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * src[[y, (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize, ch]])
                    .sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                frame[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * tmp[[(y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize, x, ch]])
                    .sum();
            }
        }
    }
}

/// Box-average each aligned `factor`-sized block, then nearest-neighbour upscale.
fn pixelate(mut frame: ArrayViewMut3<f32>, factor: usize) {
    let (h, w, c) = frame.dim();
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let mut block = frame.slice_mut(s![by..(by + factor).min(h), bx..(bx + factor).min(w), ..]);
            let count = (block.dim().0 * block.dim().1) as f32;
            for ch in 0..c {
                let mut lane = block.slice_mut(s![.., .., ch]);
                let mean = lane.sum() / count;
                lane.fill(mean);
            }
        }
    }
}

/// Encodes a frame as JPEG at `quality` and decodes it back.
pub fn jpeg_roundtrip(frame: ArrayView3<f32>, quality: u8) -> Result<Array3<f32>> {
    let (h, w, _) = frame.dim();
    let bytes: Vec<u8> = frame.iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).expect("rgb buffer");
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&img)
        .map_err(|e| Error::InvalidArgument(format!("jpeg encode failed: {e}")))?;
    let decoder = image::codecs::jpeg::JpegDecoder::new(Cursor::new(buf))
        .map_err(|e| Error::InvalidArgument(format!("jpeg decode failed: {e}")))?;
    let mut out = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut out)
        .map_err(|e| Error::InvalidArgument(format!("jpeg decode failed: {e}")))?;
    Ok(Array3::from_shape_vec((h, w, 3), out.into_iter().map(|b| b as f32 / 255.0).collect())
        .expect("decoded rgb buffer"))
}
