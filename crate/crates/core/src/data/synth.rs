//! Procedural face-like videos with optional forgery artifacts.
//!
//! A real video is a textured ellipse with eyes and a mouth drifting slowly
//! over a smooth background under slowly varying illumination. A fake video
//! is rendered the same way, then an inner face region receives one artifact
//! family:
//!
//! * `seam`: the region is replaced by a recoloured, retextured face whose
//!   blending boundary jitters from frame to frame.
//! * `flicker`: the region's intensity is rescaled by an independent factor
//!   on every frame.
//! * `checker`: a period-2 checkerboard is added inside the region.
//!
//! The domain style then perturbs global statistics of every frame.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::save_frame;
use super::manifest::{frame_file_name, DatasetManifest, Label, ManifestRole, VideoRecord};
use crate::error::{Error, Result};
use crate::perturb::{add_gaussian_noise, jpeg_roundtrip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeryFamily {
    Seam,
    Flicker,
    Checker,
}

impl ForgeryFamily {
    pub fn name(self) -> &'static str {
        match self {
            ForgeryFamily::Seam => "seam",
            ForgeryFamily::Flicker => "flicker",
            ForgeryFamily::Checker => "checker",
        }
    }
}

impl fmt::Display for ForgeryFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForgeryFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seam" => Ok(ForgeryFamily::Seam),
            "flicker" => Ok(ForgeryFamily::Flicker),
            "checker" => Ok(ForgeryFamily::Checker),
            other => Err(Error::InvalidArgument(format!("unknown forgery family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainStyle {
    #[default]
    Clean,
    /// Additive Gaussian sensor noise.
    Noisy,
    /// Reduced contrast and heavy JPEG compression.
    Compressed,
}

impl DomainStyle {
    pub fn name(self) -> &'static str {
        match self {
            DomainStyle::Clean => "clean",
            DomainStyle::Noisy => "noisy",
            DomainStyle::Compressed => "compressed",
        }
    }
}

impl fmt::Display for DomainStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(DomainStyle::Clean),
            "noisy" => Ok(DomainStyle::Noisy),
            "compressed" => Ok(DomainStyle::Compressed),
            other => Err(Error::InvalidArgument(format!("unknown domain style {other:?}"))),
        }
    }
}

const NOISY_SIGMA: f32 = 0.04;
const COMPRESSED_CONTRAST: f32 = 0.8;
const COMPRESSED_QUALITY: u8 = 25;
const FLICKER_AMPLITUDE: f32 = 0.12;
const CHECKER_AMPLITUDE: f32 = 0.06;
const FACE_TEXTURE: f32 = 0.04;
const SEAM_TEXTURE: f32 = 0.25;
/// Fraction of the frame size.
const SEAM_WAVELENGTH: std::ops::Range<f32> = 0.07..0.1;
const SEAM_SHIFT: std::ops::Range<f32> = 0.08..0.14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Dataset name; also the prefix of every video id.
    pub name: String,
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// Empty means every video is real.
    pub forgery_families: Vec<ForgeryFamily>,
    pub domain_style: DomainStyle,
    pub seed: u64,
    pub image_size: usize,
    pub role: ManifestRole,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            n_videos: 10,
            frames_per_video: 24,
            forgery_families: vec![ForgeryFamily::Seam],
            domain_style: DomainStyle::Clean,
            seed: 0,
            image_size: 64,
            role: ManifestRole::Source,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidArgument("n_videos and frames_per_video must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.name.is_empty() || self.name.contains(['\t', '/', '\n']) {
            return Err(Error::InvalidArgument(format!("invalid dataset name {:?}", self.name)));
        }
        if self.role == ManifestRole::Pretrain && !self.forgery_families.is_empty() {
            return Err(Error::InvalidArgument("pretrain must be real-only: forgery_families must be empty".into()));
        }
        Ok(())
    }

    /// Labels in generation order: reals and fakes alternate, reals first,
    /// so an odd count gives the extra video to the real class.
    pub fn labels(&self) -> Vec<Label> {
        (0..self.n_videos)
            .map(|i| {
                if self.forgery_families.is_empty() || i % 2 == 0 {
                    Label::Real
                } else {
                    Label::Fake
                }
            })
            .collect()
    }
}

/// Pixel-space ellipse holding a fake video's artifact on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactRegion {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl ArtifactRegion {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2) <= 1.0
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ARTIFACTS_FILE: &str = "artifacts.tsv";

/// Renders the dataset under `out_dir` and writes `manifest.tsv` and
/// `artifacts.tsv` next to the frame directories.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let labels = spec.labels();
    let mut records = Vec::with_capacity(spec.n_videos);
    let mut artifact_lines = String::from("video_id\tframe\tcx\tcy\trx\try\n");
    let mut fake_index = 0;
    for (i, &label) in labels.iter().enumerate() {
        let family = (label == Label::Fake).then(|| {
            let f = spec.forgery_families[fake_index % spec.forgery_families.len()];
            fake_index += 1;
            f
        });
        let video_id = format!("{}-{i:04}", spec.name);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let (frames, regions) = render_video(spec, family, &mut rng)?;
        let dir = out_dir.join(&video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in frames.iter().enumerate() {
            save_frame(frame.view(), &dir.join(frame_file_name(t)))?;
        }
        if family.is_some() {
            for (t, r) in regions.iter().enumerate() {
                artifact_lines.push_str(&format!(
                    "{video_id}\t{t}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
                    r.cx, r.cy, r.rx, r.ry
                ));
            }
        }
        records.push(VideoRecord {
            video_id: video_id.clone(),
            frames_path: PathBuf::from(&video_id),
            label: Some(label),
            domain_tag: spec.domain_style.name().into(),
            method_tag: family.map(|f| f.name().to_string()),
            frame_count: spec.frames_per_video,
        });
    }
    let on_disk = DatasetManifest::new(spec.name.clone(), spec.role, records)?;
    on_disk.save(&out_dir.join(MANIFEST_FILE))?;
    let artifacts = out_dir.join(ARTIFACTS_FILE);
    fs::write(&artifacts, artifact_lines).map_err(|e| Error::io(&artifacts, e))?;
    let mut resolved = on_disk;
    for r in &mut resolved.records {
        r.frames_path = out_dir.join(&r.frames_path);
    }
    Ok(resolved)
}

/// Reads `artifacts.tsv`: per fake video, one region per frame.
pub fn load_artifact_regions(path: &Path) -> Result<HashMap<String, Vec<ArtifactRegion>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: HashMap<String, Vec<ArtifactRegion>> = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::ManifestParse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected video_id, frame, cx, cy, rx, ry".into(),
        };
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| bad());
        out.entry(f[0].to_string()).or_default().push(ArtifactRegion {
            cx: num(f[2])?,
            cy: num(f[3])?,
            rx: num(f[4])?,
            ry: num(f[5])?,
        });
    }
    Ok(out)
}

/// Coverage of a pixel by an ellipse, with a one-pixel soft edge.
fn ellipse_alpha(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    ((1.0 - r) * rx.min(ry) + 0.5).clamp(0.0, 1.0)
}

struct Appearance {
    skin: [f32; 3],
    texture_amplitude: f32,
    texture_k: (f32, f32),
    texture_phase: f32,
}

impl Appearance {
    /// Skin colour plus a sinusoidal texture whose wavelength is a random
    /// fraction of the frame size drawn from `wavelength`.
    fn random<R: Rng + ?Sized>(size: f32, wavelength: std::ops::Range<f32>, amplitude: f32, rng: &mut R) -> Self {
        let wavelength = size * rng.random_range(wavelength);
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        let k = 2.0 * std::f32::consts::PI / wavelength;
        Self {
            skin: [
                rng.random_range(0.55..0.85),
                rng.random_range(0.4..0.65),
                rng.random_range(0.3..0.55),
            ],
            texture_amplitude: amplitude,
            texture_k: (k * angle.cos(), k * angle.sin()),
            texture_phase: rng.random_range(0.0..std::f32::consts::TAU),
        }
    }

    fn color(&self, x: f32, y: f32) -> [f32; 3] {
        let t = self.texture_amplitude * (self.texture_k.0 * x + self.texture_k.1 * y + self.texture_phase).sin();
        [self.skin[0] + t, self.skin[1] + t, self.skin[2] + t]
    }
}

fn render_video<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    family: Option<ForgeryFamily>,
    rng: &mut R,
) -> Result<(Vec<Array3<f32>>, Vec<ArtifactRegion>)> {
    use std::f32::consts::TAU;
    let s = spec.image_size;
    let sf = s as f32;
    let frames = spec.frames_per_video;

    let bg_base: [f32; 3] = [
        rng.random_range(0.15..0.5),
        rng.random_range(0.15..0.5),
        rng.random_range(0.15..0.5),
    ];
    let bg_angle = rng.random_range(0.0..TAU);
    let bg_grad = (bg_angle.cos() * 0.2 / sf, bg_angle.sin() * 0.2 / sf);
    let face = Appearance::random(sf, 0.15..0.3, FACE_TEXTURE, rng);
    let rx = sf * rng.random_range(0.34..0.4);
    let ry = rx * rng.random_range(1.15..1.3);
    let amp = (sf * 0.06, sf * 0.04);
    let period = frames as f32 * rng.random_range(1.0..2.0);
    let phase = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let light_phase = rng.random_range(0.0..TAU);
    let light_period = frames as f32 * rng.random_range(1.5..3.0);
    let mouth_color = [
        rng.random_range(0.35..0.55),
        rng.random_range(0.1..0.25),
        rng.random_range(0.1..0.25),
    ];

    // The swapped face for the seam family: same geometry, shifted colour
    // and a finer, stronger texture.
    let mut swapped = Appearance::random(sf, SEAM_WAVELENGTH, SEAM_TEXTURE, rng);
    for (c, base) in swapped.skin.iter_mut().zip(face.skin) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        *c = base + sign * rng.random_range(SEAM_SHIFT);
    }

    let mut out = Vec::with_capacity(frames);
    let mut regions = Vec::with_capacity(frames);
    for t in 0..frames {
        let tf = t as f32;
        let cx = sf / 2.0 + amp.0 * (TAU * tf / period + phase.0).sin();
        let cy = sf / 2.0 + amp.1 * (TAU * tf / period + phase.1).sin();
        let light = 1.0 + 0.05 * (TAU * tf / light_period + light_phase).sin();
        let region = ArtifactRegion {
            cx,
            cy: cy + 0.05 * ry,
            rx: 0.7 * rx,
            ry: 0.75 * ry,
        };
        // Per-frame randomness is drawn for every video so that reals and
        // fakes consume the generator identically.
        let jitter = (
            rng.random_range(-1.0..1.0f32),
            rng.random_range(-1.0..1.0f32),
            rng.random_range(-0.04..0.04f32),
        );
        let flicker = 1.0 + rng.random_range(-FLICKER_AMPLITUDE..FLICKER_AMPLITUDE);

        let mut frame = Array3::<f32>::zeros((s, s, 3));
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
                let bg_shift = bg_grad.0 * xf + bg_grad.1 * yf;
                let mut px = [bg_base[0] + bg_shift, bg_base[1] + bg_shift, bg_base[2] + bg_shift];
                let a_face = ellipse_alpha(xf, yf, cx, cy, rx, ry);
                if a_face > 0.0 {
                    let mut skin = face.color(xf - cx, yf - cy);
                    if family == Some(ForgeryFamily::Seam) {
                        let a_swap = ellipse_alpha(
                            xf,
                            yf,
                            region.cx + jitter.0,
                            region.cy + jitter.1,
                            region.rx * (1.0 + jitter.2),
                            region.ry * (1.0 + jitter.2),
                        );
                        let other = swapped.color(xf - cx, yf - cy);
                        for c in 0..3 {
                            skin[c] = (1.0 - a_swap) * skin[c] + a_swap * other[c];
                        }
                    }
                    for c in 0..3 {
                        px[c] = (1.0 - a_face) * px[c] + a_face * skin[c];
                    }
                    for side in [-1.0, 1.0] {
                        let a_eye = ellipse_alpha(xf, yf, cx + side * 0.38 * rx, cy - 0.25 * ry, 0.15 * rx, 0.08 * ry);
                        for p in px.iter_mut() {
                            *p = (1.0 - a_eye) * *p + a_eye * 0.12;
                        }
                    }
                    let a_mouth = ellipse_alpha(xf, yf, cx, cy + 0.45 * ry, 0.35 * rx, 0.07 * ry);
                    for c in 0..3 {
                        px[c] = (1.0 - a_mouth) * px[c] + a_mouth * mouth_color[c];
                    }
                }
                match family {
                    Some(ForgeryFamily::Flicker) => {
                        let a = ellipse_alpha(xf, yf, region.cx, region.cy, region.rx, region.ry);
                        for p in px.iter_mut() {
                            *p *= 1.0 + a * (flicker - 1.0);
                        }
                    }
                    Some(ForgeryFamily::Checker) => {
                        let a = ellipse_alpha(xf, yf, region.cx, region.cy, region.rx, region.ry);
                        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        for p in px.iter_mut() {
                            *p += a * sign * CHECKER_AMPLITUDE;
                        }
                    }
                    _ => {}
                }
                for (c, p) in px.iter().enumerate() {
                    frame[[y, x, c]] = p * light;
                }
            }
        }
        match spec.domain_style {
            DomainStyle::Clean => {}
            DomainStyle::Noisy => add_gaussian_noise(frame.view_mut().into_dyn(), NOISY_SIGMA, rng),
            DomainStyle::Compressed => {
                frame.mapv_inplace(|v| (0.5 + COMPRESSED_CONTRAST * (v - 0.5)).clamp(0.0, 1.0));
                frame = jpeg_roundtrip(frame.view(), COMPRESSED_QUALITY)?;
            }
        }
        frame.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out.push(frame);
        regions.push(region);
    }
    debug_assert!(out.iter().all(|f| f.len_of(Axis(2)) == 3));
    Ok((out, regions))
}
