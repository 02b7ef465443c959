//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

pub mod desk;
pub mod metric_oracle;
pub mod oracles;
pub mod perturb_checks;

use std::collections::BTreeMap;
use std::path::Path;

use last_core::adapt::{last_objective, SourceFeature, TargetFeature};
use last_core::data::{make_synthetic_dataset, DatasetManifest, ForgeryFamily, FrameStore, SyntheticSpec};
use last_core::model::{LastModel, ModelConfig, ParamGroup, ParameterStore};
use last_core::nn::adaptive_avg_pool;
use last_core::pretrain::{contrastive_loss, init_loss, init_objective, reconstruction_loss, PretrainConfig};
use ndarray::{Array1, Array4, ArrayView4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn synth(dir: &Path, name: &str, n_videos: usize, frames: usize, families: Vec<ForgeryFamily>, seed: u64) -> DatasetManifest {
    let spec = SyntheticSpec {
        name: name.into(),
        n_videos,
        frames_per_video: frames,
        forgery_families: families,
        seed,
        ..SyntheticSpec::default()
    };
    make_synthetic_dataset(&spec, &dir.join(name)).expect("synthetic dataset")
}

/// Central difference at one coordinate, restoring the parameter afterwards.
fn central_difference<F>(model: &mut LastModel<f64>, name: &str, index: usize, step: f64, mut value: F) -> (f64, f64, f64)
where
    F: FnMut(&LastModel<f64>) -> f64,
{
    let original = coordinate(&mut model.params, name, index, None);
    coordinate(&mut model.params, name, index, Some(original + step));
    let plus = value(model);
    coordinate(&mut model.params, name, index, Some(original - step));
    let minus = value(model);
    coordinate(&mut model.params, name, index, Some(original));
    ((plus - minus) / (2.0 * step), plus, minus)
}

/// Reads, and optionally overwrites, one scalar of a named tensor.
fn coordinate(params: &mut ParameterStore<f64>, name: &str, index: usize, set: Option<f64>) -> f64 {
    for (_, n, mut t) in params.named_tensors_mut() {
        if n == name {
            let slot = t.iter_mut().nth(index).expect("index in range");
            let old = *slot;
            if let Some(v) = set {
                *slot = v;
            }
            return old;
        }
    }
    panic!("no tensor named {name}");
}

fn gradient_at(grads: &ParameterStore<f64>, name: &str, index: usize) -> f64 {
    grads
        .named_tensors()
        .into_iter()
        .find(|(_, n, _)| n == name)
        .and_then(|(_, _, t)| t.iter().nth(index).copied())
        .expect("gradient coordinate")
}

/// Uniformly random scalar of a group: tensor name and flat index.
fn sample_coordinate<R: Rng>(params: &ParameterStore<f64>, group: ParamGroup, rng: &mut R) -> (String, usize) {
    let tensors = params.group_tensors(group);
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut k = rng.random_range(0..total);
    for (name, t) in tensors {
        if k < t.len() {
            return (name, k);
        }
        k -= t.len();
    }
    unreachable!()
}

/// Magnitude below which a gradient counts as zero. Some coordinates have an
/// exactly zero true gradient (an attention key bias shifts every score of a
/// query equally), where the analytic side carries round-off near 1e-20 and a
/// pure ratio would report 1.0.
pub const ZERO_GRADIENT: f64 = 1e-10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ZERO_GRADIENT)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates redrawn because a ReLU or absolute value changed branch within the step.
    pub redrawn: usize,
    pub max_rel_error: f64,
    pub per_group: BTreeMap<String, (usize, f64)>,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, group: ParamGroup, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        let e = self.per_group.entry(group.name().to_string()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(err);
        if err >= self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
    }
}

/// Evaluation of the initialisation objective built directly from layer
/// primitives, together with the branch pattern of every piecewise-linear
/// operation it passes through.
struct InitProbe {
    value: f64,
    pattern: Vec<bool>,
}

fn probe_init(
    model: &LastModel<f64>,
    clips: &[Array4<f64>],
    ids: &[usize],
    cfg: &PretrainConfig,
    fixed_targets: Option<&[Array4<f64>]>,
) -> InitProbe {
    let mut pattern = Vec::new();
    let mut zs = Vec::new();
    let mut rec = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let mut x = clip.clone();
        for conv in &model.params.encoder {
            x = conv.forward_no_cache(x.view());
            pattern.extend(x.iter().map(|&v| v > 0.0));
            x.mapv_inplace(|v| v.max(0.0));
        }
        let features = adaptive_avg_pool(x.view(), model.config.feature_grid);
        let tokens = model.tokenize(features.view()).unwrap();
        let z = model.transform(tokens.view());
        let t_star = model.reconstruct(z.view());
        let target: ArrayView4<f64> = fixed_targets.map(|t| t[i].view()).unwrap_or(features.view());
        Zip::from(&t_star).and(&target).for_each(|&a, &b| pattern.push(a > b));
        rec += reconstruction_loss(t_star.view(), target).unwrap();
        zs.push(z);
    }
    let con = contrastive_loss(&zs, ids, cfg.temperature, cfg.sim_eps).unwrap();
    InitProbe {
        value: init_loss(con, rec / clips.len() as f64, cfg.lambda1, cfg.lambda2),
        pattern,
    }
}

/// Compares analytic gradients of the initialisation objective with central
/// differences on `per_group` random coordinates of each pretrain group.
pub fn check_init_gradients(
    model: &mut LastModel<f64>,
    clips: &[Array4<f64>],
    ids: &[usize],
    cfg: &PretrainConfig,
    fixed_targets: Option<&[Array4<f64>]>,
    per_group: usize,
    step: f64,
    seed: u64,
) -> GradReport {
    let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
    let mut grads = model.params.zeros_like();
    let losses = init_objective(model, &views, ids, cfg, fixed_targets, Some(&mut grads)).unwrap();
    let base = probe_init(model, clips, ids, cfg, fixed_targets);
    assert!(
        (base.value - losses.total).abs() <= 1e-10 * losses.total.abs().max(1.0),
        "primitive forward {} disagrees with objective {}",
        base.value,
        losses.total
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for group in [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Transformer, ParamGroup::Reconstructor] {
        let mut done = 0;
        while done < per_group {
            let (name, index) = sample_coordinate(&model.params, group, &mut rng);
            let mut patterns_match = true;
            let (numeric, _, _) = central_difference(model, &name, index, step, |m| {
                let p = probe_init(m, clips, ids, cfg, fixed_targets);
                patterns_match &= p.pattern == base.pattern;
                p.value
            });
            if !patterns_match {
                report.redrawn += 1;
                assert!(report.redrawn < 50 * per_group, "too many coordinates straddle a kink");
                continue;
            }
            report.record(group, &name, index, gradient_at(&grads, &name, index), numeric);
            done += 1;
        }
    }
    report
}

fn probe_last(model: &LastModel<f64>, source: &[SourceFeature<f64>], target: &[TargetFeature<f64>], lambda: f64) -> (f64, Vec<bool>) {
    let value = last_objective(model, source, target, lambda, None).unwrap().total;
    let mut pattern = Vec::new();
    for t in target {
        let h = model.adapt_project(t.z.view());
        let t_star = model.reconstruct(h.view());
        Zip::from(&t_star).and(&t.features).for_each(|&a, &b| pattern.push(a > b));
    }
    (value, pattern)
}

pub fn check_last_gradients(
    model: &mut LastModel<f64>,
    source: &[SourceFeature<f64>],
    target: &[TargetFeature<f64>],
    lambda: f64,
    per_group: usize,
    step: f64,
    seed: u64,
) -> GradReport {
    let mut grads = model.params.zeros_like();
    last_objective(model, source, target, lambda, Some(&mut grads)).unwrap();
    let (_, base_pattern) = probe_last(model, source, target, lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for group in [ParamGroup::Adaptive, ParamGroup::Classifier] {
        let mut done = 0;
        while done < per_group {
            let (name, index) = sample_coordinate(&model.params, group, &mut rng);
            let mut patterns_match = true;
            let (numeric, _, _) = central_difference(model, &name, index, step, |m| {
                let (v, p) = probe_last(m, source, target, lambda);
                patterns_match &= p == base_pattern;
                v
            });
            if !patterns_match {
                report.redrawn += 1;
                assert!(report.redrawn < 50 * per_group, "too many coordinates straddle a kink");
                continue;
            }
            report.record(group, &name, index, gradient_at(&grads, &name, index), numeric);
            done += 1;
        }
    }
    report
}

/// Two clips from each of `videos` synthetic real videos, as `f64` arrays with video ids.
pub fn paired_clips(manifest: &DatasetManifest, frames: &FrameStore, n: usize, videos: usize, seed: u64) -> (Vec<Array4<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::new();
    let mut ids = Vec::new();
    for (v, record) in manifest.records.iter().take(videos).enumerate() {
        let (a, b) = frames.sample_positive_pair(record, n, &mut rng).unwrap();
        clips.push(a.frames.mapv(f64::from));
        clips.push(b.frames.mapv(f64::from));
        ids.extend([v, v]);
    }
    (clips, ids)
}

pub fn f64_model(config: &ModelConfig, seed: u64) -> LastModel<f64> {
    LastModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn random_latent(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
}
