use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::InvalidArgument(format!("label {other} is not 0 (real) or 1 (fake)"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestRole {
    Source,
    Target,
    Pretrain,
    Eval,
}

impl ManifestRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ManifestRole::Source => "source",
            ManifestRole::Target => "target",
            ManifestRole::Pretrain => "pretrain",
            ManifestRole::Eval => "eval",
        }
    }
}

impl std::str::FromStr for ManifestRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(ManifestRole::Source),
            "target" => Ok(ManifestRole::Target),
            "pretrain" => Ok(ManifestRole::Pretrain),
            "eval" => Ok(ManifestRole::Eval),
            other => Err(Error::InvalidArgument(format!("unknown manifest role {other:?}"))),
        }
    }
}

/// One video: a directory of `%06d.png` face frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    /// Absolute, or resolved against the manifest's directory at load time.
    pub frames_path: PathBuf,
    pub label: Option<Label>,
    pub domain_tag: String,
    pub method_tag: Option<String>,
    pub frame_count: usize,
}

impl VideoRecord {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.frames_path.join(frame_file_name(index))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub role: ManifestRole,
    pub records: Vec<VideoRecord>,
}

impl DatasetManifest {
    /// Builds a manifest after checking its invariants (unique ids, real-only pretraining).
    pub fn new(name: impl Into<String>, role: ManifestRole, records: Vec<VideoRecord>) -> Result<Self> {
        let manifest = Self {
            name: name.into(),
            role,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate video_id {}", r.video_id)));
            }
            if r.frame_count == 0 {
                return Err(Error::InvalidManifest(format!("video {} has no frames", r.video_id)));
            }
        }
        if self.role == ManifestRole::Pretrain {
            if let Some(bad) = self.records.iter().find(|r| r.label != Some(Label::Real)) {
                return Err(Error::InvalidManifest(format!(
                    "pretrain must be real-only: video {} is not labelled real",
                    bad.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_role(mut self, role: ManifestRole) -> Result<Self> {
        self.role = role;
        self.validate()?;
        Ok(self)
    }

    /// Keeps the records for which `keep` is true.
    pub fn filtered(&self, name: impl Into<String>, keep: impl Fn(&VideoRecord) -> bool) -> Result<Self> {
        Self::new(name, self.role, self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Serialises to the tab-separated line format. Paths are written as stored.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# name: {}\n# role: {}\n", self.name, self.role.as_str());
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.video_id,
                r.frames_path.display(),
                r.label.map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
                r.domain_tag,
                r.method_tag.as_deref().unwrap_or("-"),
                r.frame_count
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn parse_label(s: &str) -> Option<std::result::Result<Label, String>> {
    match s {
        "-" => None,
        "0" | "real" => Some(Ok(Label::Real)),
        "1" | "fake" => Some(Ok(Label::Fake)),
        other => Some(Err(format!("label {other:?} must be 0, 1, real, fake or -"))),
    }
}

/// Counts `NNNNNN.png` files in a frame directory.
fn count_frames(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Reads a manifest, resolves frame directories, and verifies frame counts on disk.
///
/// `clip_len` is the clip length the manifest will be sampled with; videos
/// shorter than that are rejected rather than padded. The role comes from a
/// `# role: ...` header line (default `eval`).
pub fn load_manifest(path: &Path, clip_len: usize) -> Result<DatasetManifest> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut role = ManifestRole::Eval;
    let mut records = Vec::new();
    let parse_err = |line: usize, message: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if let Some((key, value)) = header.split_once(':') {
                match key.trim() {
                    "name" => name = value.trim().to_string(),
                    "role" => role = value.trim().parse().map_err(|e: Error| parse_err(line_no, e.to_string()))?,
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(parse_err(line_no, format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let label = parse_label(fields[2]).transpose().map_err(|m| parse_err(line_no, m))?;
        let frame_count: usize = fields[5]
            .parse()
            .map_err(|_| parse_err(line_no, format!("frame_count {:?} is not a positive integer", fields[5])))?;
        let frames_path = PathBuf::from(fields[1]);
        let frames_path = if frames_path.is_absolute() {
            frames_path
        } else {
            base.join(frames_path)
        };
        records.push(VideoRecord {
            video_id: fields[0].to_string(),
            frames_path,
            label,
            domain_tag: fields[3].to_string(),
            method_tag: (fields[4] != "-").then(|| fields[4].to_string()),
            frame_count,
        });
    }
    let manifest = DatasetManifest::new(name, role, records)?;
    for r in &manifest.records {
        if r.frame_count < clip_len {
            return Err(Error::VideoTooShort {
                video_id: r.video_id.clone(),
                frame_count: r.frame_count,
                clip_len,
            });
        }
        let on_disk = count_frames(&r.frames_path)?;
        if on_disk != r.frame_count {
            return Err(Error::InvalidManifest(format!(
                "frame_count mismatch for {}: manifest says {}, {} frames on disk",
                r.video_id, r.frame_count, on_disk
            )));
        }
    }
    Ok(manifest)
}
