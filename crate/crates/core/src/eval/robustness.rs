use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use super::score::{score_manifest, DEFAULT_EVAL_CLIPS};
use crate::data::{DatasetManifest, FrameStore};
use crate::error::{Error, Result};
use crate::model::LastModel;
use crate::perturb::{Perturbation, PerturbationKind};

/// How videos are scored at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Evenly spaced clips averaged per video.
    pub n_eval_clips: usize,
    /// Base seed of the random corruptions (noise, block placement).
    pub perturbation_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_eval_clips: DEFAULT_EVAL_CLIPS,
            perturbation_seed: 0,
        }
    }
}

/// File name of one report: `{prefix}__{eval}__{setting}.txt`, where the
/// setting is `clean` or `kind-severity`.
pub fn report_file_name(prefix: &str, eval: &str, perturbation: Option<Perturbation>) -> String {
    let setting = perturbation
        .map(|p| p.to_string().replace(':', "-"))
        .unwrap_or_else(|| "clean".into());
    format!("{prefix}__{eval}__{setting}.txt")
}

/// Scores `eval` in the clean setting and under every perturbation, writing
/// one report per setting into `report_dir`. The clean result comes first.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_settings(
    model: &LastModel<f32>,
    eval: &DatasetManifest,
    frames: &FrameStore,
    perturbations: &[Perturbation],
    settings: &EvalSettings,
    descriptor: &str,
    report_dir: &Path,
    prefix: &str,
) -> Result<Vec<(Option<Perturbation>, MetricsReport)>> {
    fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let mut out = Vec::with_capacity(perturbations.len() + 1);
    for p in std::iter::once(None).chain(perturbations.iter().copied().map(Some)) {
        let scores = score_manifest(
            model,
            eval,
            frames,
            settings.n_eval_clips,
            p.map(|p| (p, settings.perturbation_seed)),
        )?;
        let report = compute_metrics(&scores, descriptor, p.map(|p| p.to_string()))?;
        let path = report_dir.join(report_file_name(prefix, &eval.name, p));
        fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
        out.push((p, report));
    }
    Ok(out)
}

/// Severity-averaged AUC per corruption kind, in table order. A kind whose
/// AUC is undefined at any severity has no mean.
pub fn kind_means(results: &[(Option<Perturbation>, MetricsReport)]) -> Vec<(PerturbationKind, Option<f64>)> {
    let mut by_kind: BTreeMap<PerturbationKind, Vec<Option<f64>>> = BTreeMap::new();
    for (p, report) in results {
        if let Some(p) = p {
            by_kind.entry(p.kind).or_default().push(report.auc);
        }
    }
    by_kind
        .into_iter()
        .map(|(kind, aucs)| {
            let mean = aucs
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            (kind, mean)
        })
        .collect()
}

/// One row of the robustness table.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub method: String,
    pub clean_auc: Option<f64>,
    pub kind_auc: Vec<(PerturbationKind, Option<f64>)>,
}

impl RobustnessRow {
    /// Mean over the seven kinds, and its difference to the clean AUC.
    pub fn average_and_drop(&self) -> Option<(f64, f64)> {
        let values: Option<Vec<f64>> = PerturbationKind::ALL
            .iter()
            .map(|k| self.kind_auc.iter().find(|(kk, _)| kk == k).and_then(|(_, v)| *v))
            .collect();
        let values = values?;
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        Some((avg, avg - self.clean_auc?))
    }
}

pub const ROBUSTNESS_TABLE_HEADER: &str = "method,clean,saturation,contrast,block,noise,blur,pixel,compress,avg,drop";

/// Video-level AUC (%) per kind, one method per row: clean first, then the
/// seven kinds, then their average and its drop from clean.
pub fn robustness_table(rows: &[RobustnessRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "nan".into());
    let mut out = String::from(ROBUSTNESS_TABLE_HEADER);
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.method, fmt(row.clean_auc));
        for kind in PerturbationKind::ALL {
            let v = row.kind_auc.iter().find(|(k, _)| *k == kind).and_then(|(_, v)| *v);
            let _ = write!(out, ",{}", fmt(v));
        }
        let (avg, drop) = row.average_and_drop().unzip();
        let _ = writeln!(out, ",{},{}", fmt(avg), fmt(drop));
    }
    out
}
