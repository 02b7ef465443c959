use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Decision threshold on the fake probability for accuracy.
pub const ACC_THRESHOLD: f64 = 0.5;

/// Video-level fake probability aggregated from clip scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub score: f64,
    pub label: Option<Label>,
    pub clip_scores: Vec<f64>,
}

impl VideoScore {
    /// Mean of the clip scores.
    pub fn from_clips(video_id: impl Into<String>, label: Option<Label>, clip_scores: Vec<f64>) -> Result<Self> {
        if clip_scores.is_empty() {
            return Err(Error::InvalidArgument("a video score needs at least one clip score".into()));
        }
        let score = clip_scores.iter().sum::<f64>() / clip_scores.len() as f64;
        Ok(Self {
            video_id: video_id.into(),
            score,
            label,
            clip_scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub acc: f64,
    /// Percent; absent when only one class is present.
    pub auc: Option<f64>,
    /// Percent; absent when only one class is present.
    pub eer: Option<f64>,
    /// Accuracy threshold.
    pub threshold: f64,
    /// Interpolated threshold at which the error rates cross.
    pub eer_threshold: Option<f64>,
    pub n_videos: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub protocol: String,
    pub perturbation: Option<String>,
}

impl MetricsReport {
    /// `key: value` lines, one metric per line.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
        let mut s = String::new();
        writeln!(s, "protocol: {}", self.protocol).unwrap();
        writeln!(s, "perturbation: {}", self.perturbation.as_deref().unwrap_or("none")).unwrap();
        writeln!(s, "n_videos: {}", self.n_videos).unwrap();
        writeln!(s, "n_real: {}", self.n_real).unwrap();
        writeln!(s, "n_fake: {}", self.n_fake).unwrap();
        writeln!(s, "acc: {:.6}", self.acc).unwrap();
        writeln!(s, "auc: {}", opt(self.auc)).unwrap();
        writeln!(s, "eer: {}", opt(self.eer)).unwrap();
        writeln!(s, "threshold: {:.6}", self.threshold).unwrap();
        writeln!(s, "eer_threshold: {}", opt(self.eer_threshold)).unwrap();
        s
    }

    pub const CSV_HEADER: &'static str = "protocol,perturbation,n_videos,acc,auc,eer";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{},{}",
            self.protocol,
            self.perturbation.as_deref().unwrap_or("none"),
            self.n_videos,
            self.acc,
            opt(self.auc),
            opt(self.eer)
        )
    }
}

/// Probability that a random fake outscores a random real, ties counting
/// one half. Computed from mid-ranks with integer arithmetic, so the result
/// is the exact pair count divided by the number of pairs.
pub fn auc(reals: &[f64], fakes: &[f64]) -> Option<f64> {
    if reals.is_empty() || fakes.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = reals
        .iter()
        .map(|&s| (s, false))
        .chain(fakes.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the mid-rank keeps every rank integral.
    let mut fake_rank2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let rank2 = (i + 1 + j) as u128;
        let fakes_here = all[i..j].iter().filter(|e| e.1).count() as u128;
        fake_rank2 += rank2 * fakes_here;
        i = j;
    }
    let nf = fakes.len() as u128;
    let nr = reals.len() as u128;
    // Twice the Mann-Whitney U statistic.
    let u2 = fake_rank2 - nf * (nf + 1);
    Some(u2 as f64 / (2 * nf * nr) as f64)
}

/// Equal error rate and its threshold.
///
/// A video is called fake when its score is at least the threshold. The
/// sweep visits every distinct score plus one point above the maximum, finds
/// the first threshold where FPR - FNR stops being positive, and
/// interpolates linearly with the threshold before it.
pub fn eer(reals: &[f64], fakes: &[f64]) -> Option<(f64, f64)> {
    if reals.is_empty() || fakes.is_empty() {
        return None;
    }
    let mut thresholds: Vec<f64> = reals.iter().chain(fakes).copied().collect();
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();
    let top = thresholds.last().copied().expect("nonempty");
    thresholds.push(top.max(1.0) + 1e-6);
    let rates = |t: f64| {
        let fpr = reals.iter().filter(|&&s| s >= t).count() as f64 / reals.len() as f64;
        let fnr = fakes.iter().filter(|&&s| s < t).count() as f64 / fakes.len() as f64;
        (fpr, fnr)
    };
    let mut prev = (thresholds[0], rates(thresholds[0]));
    for &t in &thresholds {
        let (fpr, fnr) = rates(t);
        let d = fpr - fnr;
        if d <= 0.0 {
            if d == 0.0 {
                return Some((fpr, t));
            }
            let (pt, (pfpr, pfnr)) = prev;
            let pd = pfpr - pfnr;
            let alpha = pd / (pd - d);
            return Some((pfpr + alpha * (fpr - pfpr), pt + alpha * (t - pt)));
        }
        prev = (t, (fpr, fnr));
    }
    unreachable!("the final threshold rejects every video, so FPR - FNR = -1 there")
}

/// ACC at the fixed threshold, AUC and EER, all in percent.
pub fn compute_metrics(scores: &[VideoScore], protocol: &str, perturbation: Option<String>) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no video scores to evaluate".into()));
    }
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for s in scores {
        match s.label {
            Some(Label::Real) => reals.push(s.score),
            Some(Label::Fake) => fakes.push(s.score),
            None => {
                return Err(Error::InvalidArgument(format!("video {} has no label", s.video_id)));
            }
        }
    }
    let correct = scores
        .iter()
        .filter(|s| (s.score >= ACC_THRESHOLD) == (s.label == Some(Label::Fake)))
        .count();
    let eer = eer(&reals, &fakes);
    Ok(MetricsReport {
        acc: 100.0 * correct as f64 / scores.len() as f64,
        auc: auc(&reals, &fakes).map(|a| 100.0 * a),
        eer: eer.map(|(e, _)| 100.0 * e),
        threshold: ACC_THRESHOLD,
        eer_threshold: eer.map(|(_, t)| t),
        n_videos: scores.len(),
        n_real: reals.len(),
        n_fake: fakes.len(),
        protocol: protocol.to_string(),
        perturbation,
    })
}
