use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use tracing::info;

use super::config::RunConfig;
use super::rundir::RunDir;
use crate::adapt::{adapt, train_source_only, AdaptEpoch};
use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{
    build_adaptation_pool, load_manifest, make_synthetic_dataset, AdaptationPool, DatasetManifest, FrameStore,
    Label, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_settings, export_embeddings, kind_means, robustness_table, run_protocol, saliency_map, EmbeddingLayer,
    MetricsReport, ProtocolOutcome, ProtocolSettings, RobustnessRow,
};
use crate::model::LastModel;
use crate::perturb::{perturbation_grid, Perturbation};
use crate::pretrain::{pretrain, PretrainEpoch};
use crate::train::{stage_rng, write_csv};

/// Random stream of each stage, shared with the protocol runner.
const INIT_STREAM: u64 = 0;
const POOL_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const ADAPT_STREAM: u64 = 1000;

/// Directory a configured synthetic dataset is rendered into.
pub fn dataset_dir(config: &RunConfig, name: &str) -> PathBuf {
    config.out_dir.join("data").join(name)
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    path.cloned()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config key)")))
}

fn load_checkpoint(run: &mut RunDir, path: &Path) -> Result<(Checkpoint, LastModel<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    run.record_input("checkpoint", path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn load_input_manifest(run: &mut RunDir, role: &str, path: &Path, clip_len: usize) -> Result<DatasetManifest> {
    let manifest = load_manifest(path, clip_len)?;
    run.record_input(role, path)?;
    Ok(manifest)
}

pub fn synth(config: &RunConfig, specs: &[SyntheticSpec]) -> Result<Vec<DatasetManifest>> {
    if specs.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    RunDir::create(config, "synth")?;
    specs
        .iter()
        .map(|spec| {
            let dir = dataset_dir(config, &spec.name);
            info!(name = %spec.name, videos = spec.n_videos, dir = %dir.display(), "rendering dataset");
            make_synthetic_dataset(spec, &dir)
        })
        .collect()
}

/// Renders every configured dataset whose manifest is not yet on disk.
fn ensure_datasets(config: &RunConfig) -> Result<()> {
    for spec in &config.datasets {
        let dir = dataset_dir(config, &spec.name);
        if !dir.join(crate::data::synth::MANIFEST_FILE).exists() {
            info!(name = %spec.name, "rendering missing dataset");
            make_synthetic_dataset(spec, &dir)?;
        }
    }
    Ok(())
}

/// Writes `init.ckpt`, `pretrain.ckpt` and `pretrain_log.csv`.
pub fn pretrain_cmd(config: &RunConfig, init: Option<&Path>) -> Result<Checkpoint> {
    let mut run = RunDir::create(config, "pretrain")?;
    let n = config.model.clip_len;
    let manifest_path = require(config.data.pretrain_manifest.as_ref(), "pretrain manifest")?;
    let manifest = load_input_manifest(&mut run, "pretrain_manifest", &manifest_path, n + 1)?;
    let (start, mut model) = match init {
        Some(path) => load_checkpoint(&mut run, path)?,
        None => {
            let model = LastModel::<f32>::new(config.model.clone(), &mut stage_rng(config.seed, INIT_STREAM))?;
            (Checkpoint::new(&model, Phase::Init, None), model)
        }
    };
    let init_hash = start.save(&run.join("init.ckpt"))?;
    let log = pretrain(
        &mut model,
        &manifest,
        &FrameStore::new(),
        &config.pretrain,
        &mut stage_rng(config.seed, PRETRAIN_STREAM),
    )?;
    write_csv(
        &run.join("pretrain_log.csv"),
        PretrainEpoch::CSV_HEADER,
        log.iter().map(PretrainEpoch::csv_row),
    )?;
    let mut ckpt = Checkpoint::new(&model, Phase::Pretrain, Some(init_hash));
    ckpt.meta = serde_json::json!({ "seed": config.seed, "epochs": config.pretrain.epochs });
    ckpt.save(&run.join("pretrain.ckpt"))?;
    Ok(ckpt)
}

/// Trains the heads with (`with_target`) or without the reconstruction term
/// and writes `<name>.ckpt` and `<name>_log.csv`.
pub fn train_heads(config: &RunConfig, checkpoint: &Path, with_target: bool) -> Result<Checkpoint> {
    let name = if with_target { "adapt" } else { "source-only" };
    let mut run = RunDir::create(config, name)?;
    let (parent, mut model) = load_checkpoint(&mut run, checkpoint)?;
    let n = model.config.clip_len;
    let source_path = require(config.data.source_manifest.as_ref(), "source manifest")?;
    let source = load_input_manifest(&mut run, "source_manifest", &source_path, n)?;
    let frames = FrameStore::new();
    let mut rng = stage_rng(config.seed, ADAPT_STREAM);
    let log = if with_target {
        let target_path = require(config.data.target_manifest.as_ref(), "target manifest")?;
        let target = load_input_manifest(&mut run, "target_manifest", &target_path, n)?;
        let pool = build_adaptation_pool(
            &source,
            &target,
            config.data.target_ratio,
            &mut stage_rng(config.seed, POOL_STREAM),
        )?;
        let listing: String = pool.target().iter().map(|t| format!("{}\n", t.video_id)).collect();
        let pool_file = run.join("target_pool.txt");
        fs::write(&pool_file, listing).map_err(|e| Error::io(&pool_file, e))?;
        adapt(&mut model, &pool, &frames, &config.adapt, &mut rng)?
    } else {
        train_source_only(&mut model, &AdaptationPool::source_only(&source)?, &frames, &config.adapt, &mut rng)?
    };
    write_csv(
        &run.join(format!("{name}_log.csv")),
        AdaptEpoch::CSV_HEADER,
        log.iter().map(AdaptEpoch::csv_row),
    )?;
    let mut ckpt = Checkpoint::new(&model, Phase::Adapt, Some(parent.content_hash()));
    ckpt.meta = serde_json::json!({ "seed": config.seed, "variant": name, "lambda": config.adapt.lambda });
    ckpt.save(&run.join(format!("{name}.ckpt")))?;
    Ok(ckpt)
}

fn eval_manifests(run: &mut RunDir, config: &RunConfig, clip_len: usize) -> Result<Vec<DatasetManifest>> {
    if config.data.eval_manifests.is_empty() {
        return Err(Error::Config("no eval manifest given (flag or data.eval_manifests)".into()));
    }
    config
        .data
        .eval_manifests
        .iter()
        .map(|p| load_input_manifest(run, "eval_manifest", p, clip_len))
        .collect()
}

/// Scores every eval manifest clean and under `perturbations`; reports go to
/// `reports/` and a summary row per setting to `metrics.csv`.
pub fn eval_cmd(config: &RunConfig, checkpoint: &Path, perturbations: &[Perturbation]) -> Result<Vec<MetricsReport>> {
    let mut run = RunDir::create(config, "eval")?;
    let (_, model) = load_checkpoint(&mut run, checkpoint)?;
    let evals = eval_manifests(&mut run, config, model.config.clip_len)?;
    let frames = FrameStore::new();
    let mut reports = Vec::new();
    for eval in &evals {
        let results = evaluate_settings(
            &model,
            eval,
            &frames,
            perturbations,
            &config.eval,
            &format!("eval/{}", eval.name),
            &run.join("reports"),
            "eval",
        )?;
        reports.extend(results.into_iter().map(|(_, r)| r));
    }
    write_csv(&run.join("metrics.csv"), MetricsReport::CSV_HEADER, reports.iter().map(MetricsReport::csv_row))?;
    Ok(reports)
}

/// The 7x5 perturbation grid plus the clean setting for every eval manifest:
/// 36 reports each, `robustness_cells.csv` with every setting and
/// `robustness.csv` with severity-averaged AUC per kind.
pub fn robustness_cmd(config: &RunConfig, checkpoint: &Path, label: &str) -> Result<Vec<RobustnessRow>> {
    let mut run = RunDir::create(config, "robustness")?;
    let (_, model) = load_checkpoint(&mut run, checkpoint)?;
    let evals = eval_manifests(&mut run, config, model.config.clip_len)?;
    let frames = FrameStore::new();
    let grid = perturbation_grid();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for eval in &evals {
        let method = if evals.len() == 1 { label.to_string() } else { format!("{label}/{}", eval.name) };
        let results = evaluate_settings(
            &model,
            eval,
            &frames,
            &grid,
            &config.eval,
            &format!("robustness/{method}"),
            &run.join("reports"),
            label,
        )?;
        cells.extend(results.iter().map(|(_, r)| r.csv_row()));
        rows.push(RobustnessRow {
            method,
            clean_auc: results[0].1.auc,
            kind_auc: kind_means(&results),
        });
    }
    write_csv(&run.join("robustness_cells.csv"), MetricsReport::CSV_HEADER, cells)?;
    let table = run.join("robustness.csv");
    fs::write(&table, robustness_table(&rows)).map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

pub fn embed_cmd(config: &RunConfig, checkpoint: &Path, layer: EmbeddingLayer, output: Option<&Path>) -> Result<PathBuf> {
    let mut run = RunDir::create(config, "embed")?;
    let (_, model) = load_checkpoint(&mut run, checkpoint)?;
    let evals = eval_manifests(&mut run, config, model.config.clip_len)?;
    let frames = FrameStore::new();
    let layer_name = match layer {
        EmbeddingLayer::Z => "z",
        EmbeddingLayer::H => "h",
    };
    let mut last = PathBuf::new();
    for eval in &evals {
        let out = match output {
            Some(p) if evals.len() == 1 => p.to_path_buf(),
            _ => run.join(format!("embeddings_{}_{layer_name}.tsv", eval.name)),
        };
        export_embeddings(&model, eval, &frames, layer, config.eval.n_eval_clips, &out)?;
        last = out;
    }
    Ok(last)
}

/// Grad-CAM maps for one clip of one video: a `frame, row, col, value` table
/// and a grayscale strip of the per-frame maps, each cell `scale` pixels wide.
pub fn saliency_cmd(
    config: &RunConfig,
    checkpoint: &Path,
    video: Option<&str>,
    offset: usize,
    class: Label,
    scale: u32,
) -> Result<PathBuf> {
    let mut run = RunDir::create(config, "saliency")?;
    let (_, model) = load_checkpoint(&mut run, checkpoint)?;
    let evals = eval_manifests(&mut run, config, model.config.clip_len)?;
    let record = match video {
        Some(id) => evals
            .iter()
            .flat_map(|m| m.records.iter())
            .find(|r| r.video_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("video {id} not found in the eval manifests")))?,
        None => evals
            .iter()
            .flat_map(|m| m.records.iter())
            .next()
            .ok_or_else(|| Error::InvalidArgument("eval manifests are empty".into()))?,
    };
    let clip = FrameStore::new().clip_at(record, offset, model.config.clip_len)?;
    let cam = saliency_map(&model, clip.frames.view(), class.as_index())?;
    let (n, g, _) = cam.dim();
    let mut table = String::from("frame\trow\tcol\tvalue\n");
    for ((t, y, x), v) in cam.indexed_iter() {
        table.push_str(&format!("{t}\t{y}\t{x}\t{v}\n"));
    }
    let stem = format!("saliency_{}_{offset}", record.video_id);
    let tsv = run.join(format!("{stem}.tsv"));
    fs::write(&tsv, table).map_err(|e| Error::io(&tsv, e))?;
    let cell = scale.max(1);
    let side = g as u32 * cell;
    let img = GrayImage::from_fn(side * n as u32, side, |px, py| {
        let (t, x, y) = ((px / side) as usize, ((px % side) / cell) as usize, (py / cell) as usize);
        Luma([(cam[[t, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    let png = run.join(format!("{stem}.png"));
    img.save(&png).map_err(|e| Error::Image {
        path: png.clone(),
        message: e.to_string(),
    })?;
    Ok(tsv)
}

pub fn protocol_cmd(config: &RunConfig) -> Result<ProtocolOutcome> {
    let mut run = RunDir::create(config, "protocol")?;
    ensure_datasets(config)?;
    let spec = &config.protocol;
    for p in spec.pretrain_manifest.iter().chain([&spec.source_manifest]).chain(&spec.target_manifest) {
        run.record_input("manifest", p)?;
    }
    for p in &spec.eval_manifests {
        run.record_input("eval_manifest", p)?;
    }
    let settings = ProtocolSettings {
        model: config.model.clone(),
        pretrain: config.pretrain.clone(),
        adapt: config.adapt.clone(),
    };
    let outcome = run_protocol(spec, &settings, &FrameStore::new(), &run.path)?;
    if !outcome.robustness.is_empty() {
        let rows = protocol_robustness_rows(&outcome);
        let table = run.join("robustness_table.csv");
        fs::write(&table, robustness_table(&rows)).map_err(|e| Error::io(&table, e))?;
    }
    Ok(outcome)
}

/// One table row per protocol cell that was evaluated under corruptions.
fn protocol_robustness_rows(outcome: &ProtocolOutcome) -> Vec<RobustnessRow> {
    let mut rows: Vec<RobustnessRow> = Vec::new();
    for s in &outcome.robustness {
        let method = format!("seed{}/frac{:.2}/{}/{}", s.seed, s.fraction, s.variant.name(), s.eval);
        match rows.iter_mut().find(|r| r.method == method) {
            Some(r) => r.kind_auc.push((s.kind, s.mean_auc)),
            None => rows.push(RobustnessRow {
                clean_auc: outcome.clean_auc(s.seed, s.fraction, s.variant, &s.eval),
                method,
                kind_auc: vec![(s.kind, s.mean_auc)],
            }),
        }
    }
    rows
}
