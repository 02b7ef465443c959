use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::metrics::MetricsReport;
use super::robustness::{evaluate_settings, kind_means, EvalSettings};
use super::score::DEFAULT_EVAL_CLIPS;
use crate::adapt::{adapt, train_source_only, AdaptConfig, AdaptEpoch};
use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{build_adaptation_pool, load_manifest, AdaptationPool, DatasetManifest, FrameStore};
use crate::error::{Error, Result};
use crate::model::{LastModel, ModelConfig};
use crate::perturb::{perturbation_grid, Perturbation, PerturbationKind};
use crate::pretrain::{pretrain, PretrainConfig, PretrainEpoch};
use crate::train::{stage_rng, write_csv};

/// How the heads are trained after initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Adapt,
    SourceOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Adapt => "adapt",
            Variant::SourceOnly => "source-only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapt" => Ok(Variant::Adapt),
            "source-only" => Ok(Variant::SourceOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Corruptions evaluated in addition to the clean setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationSet {
    #[default]
    None,
    /// All 35 kind/severity pairs.
    Grid,
    List(Vec<String>),
}

impl PerturbationSet {
    pub fn resolve(&self) -> Result<Vec<Perturbation>> {
        match self {
            PerturbationSet::None => Ok(Vec::new()),
            PerturbationSet::Grid => Ok(perturbation_grid()),
            PerturbationSet::List(items) => items.iter().map(|s| s.parse()).collect(),
        }
    }
}

/// One experiment: for every seed and pretraining fraction, initialise the
/// backbone, train each head variant, and evaluate every manifest under the
/// clean setting plus every requested corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Real-only videos for initialisation; absent means no pretraining.
    pub pretrain_manifest: Option<PathBuf>,
    /// Fractions of the pretraining videos to use; 0 skips pretraining.
    pub pretrain_fractions: Vec<f64>,
    pub source_manifest: PathBuf,
    pub target_manifest: Option<PathBuf>,
    pub target_ratio: f64,
    pub variants: Vec<Variant>,
    pub eval_manifests: Vec<PathBuf>,
    pub perturbations: PerturbationSet,
    pub n_eval_clips: usize,
    pub perturbation_seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            name: "protocol".into(),
            seeds: vec![0],
            pretrain_manifest: None,
            pretrain_fractions: vec![1.0],
            source_manifest: PathBuf::new(),
            target_manifest: None,
            target_ratio: 0.1,
            variants: vec![Variant::Adapt],
            eval_manifests: Vec::new(),
            perturbations: PerturbationSet::None,
            n_eval_clips: DEFAULT_EVAL_CLIPS,
            perturbation_seed: 0,
        }
    }
}

impl ProtocolSpec {
    /// Resolves relative manifest paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.pretrain_manifest.as_mut() {
            fix(p);
        }
        fix(&mut self.source_manifest);
        if let Some(p) = self.target_manifest.as_mut() {
            fix(p);
        }
        self.eval_manifests.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() || self.pretrain_fractions.is_empty() {
            return Err(Error::Config("seeds, variants and pretrain_fractions must be non-empty".into()));
        }
        if self.eval_manifests.is_empty() {
            return Err(Error::Config("protocol needs at least one eval manifest".into()));
        }
        if let Some(f) = self.pretrain_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("pretrain fraction {f} outside [0, 1]")));
        }
        if self.variants.contains(&Variant::Adapt) && self.target_manifest.is_none() {
            return Err(Error::Config("the adapt variant needs a target manifest".into()));
        }
        self.perturbations.resolve()?;
        Ok(())
    }
}

/// One evaluated cell of a protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub seed: u64,
    pub fraction: f64,
    pub variant: Variant,
    pub eval: String,
    pub perturbation: Option<Perturbation>,
    pub report: MetricsReport,
}

/// Severity-averaged AUC of one corruption kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub seed: u64,
    pub fraction: f64,
    pub variant: Variant,
    pub eval: String,
    pub kind: PerturbationKind,
    pub mean_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProtocolOutcome {
    pub cells: Vec<ProtocolCell>,
    pub robustness: Vec<RobustnessSummary>,
}

impl ProtocolOutcome {
    pub const CELLS_HEADER: &'static str = "seed,fraction,variant,eval,perturbation,n_videos,acc,auc,eer";
    pub const ROBUSTNESS_HEADER: &'static str = "seed,fraction,variant,eval,kind,mean_auc";

    pub fn cell_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        self.cells
            .iter()
            .map(|c| {
                format!(
                    "{},{:.4},{},{},{},{},{:.6},{},{}",
                    c.seed,
                    c.fraction,
                    c.variant.name(),
                    c.eval,
                    c.perturbation.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
                    c.report.n_videos,
                    c.report.acc,
                    opt(c.report.auc),
                    opt(c.report.eer)
                )
            })
            .collect()
    }

    pub fn robustness_rows(&self) -> Vec<String> {
        self.robustness
            .iter()
            .map(|r| {
                format!(
                    "{},{:.4},{},{},{},{}",
                    r.seed,
                    r.fraction,
                    r.variant.name(),
                    r.eval,
                    r.kind,
                    r.mean_auc.map(|v| format!("{v:.6}")).unwrap_or_default()
                )
            })
            .collect()
    }

    /// Clean-setting AUC for each cell key, for quick comparisons.
    pub fn clean_auc(&self, seed: u64, fraction: f64, variant: Variant, eval: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.seed == seed && c.fraction == fraction && c.variant == variant && c.eval == eval && c.perturbation.is_none()
            })
            .and_then(|c| c.report.auc)
    }
}

/// Training settings shared by every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSettings {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
}

/// Subset of a pretraining manifest: the first `ceil(fraction * N)` videos of
/// a seed-determined order, so smaller fractions are nested in larger ones.
pub fn pretrain_subset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = (fraction * manifest.len() as f64).ceil() as usize;
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    DatasetManifest::new(
        format!("{}@{fraction}", manifest.name),
        manifest.role,
        chosen.into_iter().map(|i| manifest.records[i].clone()).collect(),
    )
}

/// Runs the full protocol, persisting checkpoints, logs and reports under `out_dir`.
pub fn run_protocol(
    spec: &ProtocolSpec,
    settings: &ProtocolSettings,
    frames: &FrameStore,
    out_dir: &Path,
) -> Result<ProtocolOutcome> {
    spec.validate()?;
    let n = settings.model.clip_len;
    let pretrain_manifest = spec
        .pretrain_manifest
        .as_deref()
        .map(|p| load_manifest(p, n + 1))
        .transpose()?;
    let source = load_manifest(&spec.source_manifest, n)?;
    let target = spec.target_manifest.as_deref().map(|p| load_manifest(p, n)).transpose()?;
    let evals = spec
        .eval_manifests
        .iter()
        .map(|p| load_manifest(p, n))
        .collect::<Result<Vec<_>>>()?;
    if let Some(empty) = evals.iter().find(|m| m.is_empty()) {
        return Err(Error::InvalidArgument(format!("evaluation manifest {} is empty", empty.name)));
    }
    let perturbations = spec.perturbations.resolve()?;
    let mut outcome = ProtocolOutcome::default();
    for &seed in &spec.seeds {
        let init = LastModel::<f32>::new(settings.model.clone(), &mut stage_rng(seed, 0))?;
        let pool_rng = &mut stage_rng(seed, 1);
        let pool = match &target {
            Some(t) => build_adaptation_pool(&source, t, spec.target_ratio, pool_rng)?,
            None => AdaptationPool::source_only(&source)?,
        };
        for (fi, &fraction) in spec.pretrain_fractions.iter().enumerate() {
            let cell_dir = out_dir.join(format!("seed{seed}")).join(format!("frac{fraction:.2}"));
            fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
            let mut model = init.clone();
            let phase = match (&pretrain_manifest, fraction > 0.0) {
                (Some(m), true) => {
                    let subset = pretrain_subset(m, fraction, seed)?;
                    info!(seed, fraction, videos = subset.len(), "pretraining");
                    let log = pretrain(
                        &mut model,
                        &subset,
                        frames,
                        &settings.pretrain,
                        &mut stage_rng(seed, 2 + fi as u64),
                    )?;
                    write_csv(
                        &cell_dir.join("pretrain_log.csv"),
                        PretrainEpoch::CSV_HEADER,
                        log.iter().map(PretrainEpoch::csv_row),
                    )?;
                    Phase::Pretrain
                }
                _ => Phase::Init,
            };
            let mut base = Checkpoint::new(&model, phase, None);
            base.meta = serde_json::json!({ "seed": seed, "pretrain_fraction": fraction });
            let base_hash = base.save(&cell_dir.join("pretrain.ckpt"))?;
            for &variant in &spec.variants {
                let mut trained = model.clone();
                // The same stream for every variant gives them identical source schedules.
                let mut rng = stage_rng(seed, 1000 + fi as u64);
                let log = match variant {
                    Variant::Adapt => adapt(&mut trained, &pool, frames, &settings.adapt, &mut rng)?,
                    Variant::SourceOnly => train_source_only(&mut trained, &pool, frames, &settings.adapt, &mut rng)?,
                };
                write_csv(
                    &cell_dir.join(format!("{}_log.csv", variant.name())),
                    AdaptEpoch::CSV_HEADER,
                    log.iter().map(AdaptEpoch::csv_row),
                )?;
                let mut ckpt = Checkpoint::new(&trained, Phase::Adapt, Some(base_hash.clone()));
                ckpt.meta = serde_json::json!({ "seed": seed, "pretrain_fraction": fraction, "variant": variant.name() });
                ckpt.save(&cell_dir.join(format!("{}.ckpt", variant.name())))?;
                let report_dir = cell_dir.join("reports");
                fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
                for eval in &evals {
                    let descriptor = format!("{}/seed{seed}/frac{fraction:.2}/{}/{}", spec.name, variant.name(), eval.name);
                    let settings = EvalSettings {
                        n_eval_clips: spec.n_eval_clips,
                        perturbation_seed: spec.perturbation_seed,
                    };
                    let results = evaluate_settings(
                        &trained,
                        eval,
                        frames,
                        &perturbations,
                        &settings,
                        &descriptor,
                        &report_dir,
                        variant.name(),
                    )?;
                    let means = kind_means(&results);
                    for (p, report) in results {
                        outcome.cells.push(ProtocolCell {
                            seed,
                            fraction,
                            variant,
                            eval: eval.name.clone(),
                            perturbation: p,
                            report,
                        });
                    }
                    for (kind, mean_auc) in means {
                        outcome.robustness.push(RobustnessSummary {
                            seed,
                            fraction,
                            variant,
                            eval: eval.name.clone(),
                            kind,
                            mean_auc,
                        });
                    }
                }
            }
        }
    }
    write_csv(&out_dir.join("reports.csv"), ProtocolOutcome::CELLS_HEADER, outcome.cell_rows())?;
    if !outcome.robustness.is_empty() {
        write_csv(
            &out_dir.join("robustness.csv"),
            ProtocolOutcome::ROBUSTNESS_HEADER,
            outcome.robustness_rows(),
        )?;
    }
    Ok(outcome)
}
