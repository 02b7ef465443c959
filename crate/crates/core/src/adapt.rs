//! Semi-supervised adaptation of the adaptive layer and classifier over a
//! frozen backbone: cross-entropy on labelled source clips plus latent
//! reconstruction of unlabelled target clips.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::data::{sample_offset, AdaptationPool, FrameStore, Label};
use crate::error::{Error, Result};
use crate::model::{LastModel, ParameterStore, TrainPhase};
use crate::nn::{Adam, AdamConfig, Real, WarmupSchedule};
use crate::pretrain::{reconstruction_loss, reconstruction_loss_grad};
use crate::train::{ensure_finite, optimizer_step, shuffled_batches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Weight of the classification term; the reconstruction term gets `1 - lambda`.
    pub lambda: f64,
    pub epochs: usize,
    pub source_clips: usize,
    pub target_clips: usize,
    /// Clips drawn from every source video per epoch.
    pub clips_per_video: usize,
    pub optimizer: AdamConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            epochs: 10,
            source_clips: 64,
            target_clips: 8,
            clips_per_video: 8,
            optimizer: AdamConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.source_clips == 0 || self.target_clips == 0 || self.clips_per_video == 0 {
            return Err(Error::Config(
                "source_clips, target_clips and clips_per_video must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Mean 2-class softmax cross-entropy; `logits` is `(batch, 2)`.
pub fn classification_loss<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    classification_core(logits, labels).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the logits.
pub fn classification_loss_grad<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    classification_core(logits, labels)
}

fn classification_core<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    if logits.nrows() == 0 {
        return Err(Error::InvalidArgument("classification batch is empty".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not 0 (real) or 1 (fake)")));
    }
    let count = T::from_usize(labels.len()).expect("batch size");
    let mut loss = T::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[labels[i]];
        for (c, &v) in row.iter().enumerate() {
            let target = if c == labels[i] { T::one() } else { T::zero() };
            grad[[i, c]] = ((v - lse).exp() - target) / count;
        }
    }
    Ok((loss / count, grad))
}

/// `lambda * l_cls + (1 - lambda) * l_rec`.
pub fn last_loss<T: Real>(l_cls: T, l_rec: T, lambda: f64) -> Result<T> {
    check_lambda(lambda)?;
    Ok(T::lit(lambda) * l_cls + T::lit(1.0 - lambda) * l_rec)
}

/// Mean reconstruction loss of `R(L_d(z))` against each clip's own features.
pub fn target_reconstruction_loss<T: Real>(model: &LastModel<T>, clips: &[ArrayView4<T>]) -> Result<T> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("target batch is empty".into()));
    }
    let mut total = T::zero();
    for clip in clips {
        let (features, z) = model.backbone(clip.view())?;
        let h = model.adapt_project(z.view());
        total += reconstruction_loss(model.reconstruct(h.view()).view(), features.view())?;
    }
    Ok(total / T::from_usize(clips.len()).expect("batch size"))
}

/// Frozen-backbone output for a labelled source clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFeature<T> {
    pub z: Array1<T>,
    pub label: Label,
}

/// Frozen-backbone output for an unlabelled target clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeature<T> {
    pub z: Array1<T>,
    pub features: Array4<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LastLosses {
    pub cls: f64,
    pub rec: f64,
    pub total: f64,
    /// Source clips whose argmax matches the label.
    pub correct: usize,
}

/// Evaluates the adaptation objective on precomputed backbone outputs and,
/// when `grads` is given, accumulates gradients for the adaptive layer and
/// classifier. An empty target batch contributes a zero reconstruction term.
pub fn last_objective<T: Real>(
    model: &LastModel<T>,
    source: &[SourceFeature<T>],
    target: &[TargetFeature<T>],
    lambda: f64,
    mut grads: Option<&mut ParameterStore<T>>,
) -> Result<LastLosses> {
    check_lambda(lambda)?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("source batch is empty".into()));
    }
    let d = model.config.token_dim;
    let zs = Array2::from_shape_fn((source.len(), d), |(i, j)| source[i].z[j]);
    let labels: Vec<usize> = source.iter().map(|s| s.label.as_index()).collect();
    let p = &model.params;
    let h = p.adaptive.forward(zs.view());
    let logits = p.classifier.forward(h.view());
    let (cls, mut d_logits) = classification_loss_grad(logits.view(), &labels)?;
    let correct = logits
        .outer_iter()
        .zip(&labels)
        .filter(|(row, &l)| (if row[1] > row[0] { 1 } else { 0 }) == l)
        .count();
    let lam = T::lit(lambda);
    if let Some(g) = grads.as_deref_mut() {
        d_logits.mapv_inplace(|v| v * lam);
        let dh = p.classifier.backward(h.view(), d_logits.view(), &mut g.classifier);
        p.adaptive.backward_params(zs.view(), dh.view(), &mut g.adaptive);
    }
    let mut rec = T::zero();
    if !target.is_empty() {
        let count = T::from_usize(target.len()).expect("batch size");
        let rec_weight = T::lit(1.0 - lambda) / count;
        for t in target {
            let h = p.adaptive.forward_vec(t.z.view());
            let (t_star, cache) = model.reconstruct_traced(h.view());
            let (l, mut d_star) = reconstruction_loss_grad(t_star.view(), t.features.view())?;
            rec += l;
            if let Some(g) = grads.as_deref_mut() {
                d_star.mapv_inplace(|v| v * rec_weight);
                // The reconstructor is frozen; its gradient lands in a scratch
                // accumulator the optimizer never reads in this phase.
                let dh = model.reconstruct_backward(&cache, d_star.view(), g);
                p.adaptive.backward_vec(t.z.view(), dh.view(), &mut g.adaptive);
            }
        }
        rec /= count;
    }
    let total = last_loss(cls, rec, lambda)?;
    Ok(LastLosses {
        cls: cls.to_f64().expect("finite"),
        rec: rec.to_f64().expect("finite"),
        total: total.to_f64().expect("finite"),
        correct,
    })
}

/// One line of the adaptation log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_rec: f64,
    pub l_last: f64,
    pub source_acc: f64,
}

impl AdaptEpoch {
    pub const CSV_HEADER: &'static str = "epoch,L_cls,L_rec,L_last,source_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.l_cls, self.l_rec, self.l_last, self.source_acc
        )
    }
}

/// Backbone outputs keyed by `(video index, offset)`. Valid only while the
/// backbone stays frozen, which adaptation guarantees.
#[derive(Debug, Default)]
struct FeatureCache {
    source: HashMap<(usize, usize), Array1<f32>>,
    target: HashMap<(usize, usize), (Array1<f32>, Array4<f32>)>,
}

impl FeatureCache {
    fn source(
        &mut self,
        model: &LastModel<f32>,
        pool: &AdaptationPool,
        frames: &FrameStore,
        video: usize,
        offset: usize,
    ) -> Result<SourceFeature<f32>> {
        let label = pool.source()[video].label;
        if let Some(z) = self.source.get(&(video, offset)) {
            return Ok(SourceFeature { z: z.clone(), label });
        }
        let (clip, _) = pool.source_clip_at(frames, video, offset, model.config.clip_len)?;
        let (_, z) = model.backbone(clip.frames.view())?;
        self.source.insert((video, offset), z.clone());
        Ok(SourceFeature { z, label })
    }

    fn target(
        &mut self,
        model: &LastModel<f32>,
        pool: &AdaptationPool,
        frames: &FrameStore,
        video: usize,
        offset: usize,
    ) -> Result<TargetFeature<f32>> {
        if let Some((z, f)) = self.target.get(&(video, offset)) {
            return Ok(TargetFeature {
                z: z.clone(),
                features: f.clone(),
            });
        }
        let clip = pool.target_clip_at(frames, video, offset, model.config.clip_len)?;
        let (features, z) = model.backbone(clip.frames.view())?;
        self.target.insert((video, offset), (z.clone(), features.clone()));
        Ok(TargetFeature { z, features })
    }
}

/// Trains the adaptive layer and classifier in place. Source and target
/// draws use independent generators split from `rng`, so the source
/// schedule does not depend on whether a target side is present.
pub fn adapt<R: Rng + ?Sized>(
    model: &mut LastModel<f32>,
    pool: &AdaptationPool,
    frames: &FrameStore,
    config: &AdaptConfig,
    rng: &mut R,
) -> Result<Vec<AdaptEpoch>> {
    if pool.target().is_empty() {
        return Err(Error::InvalidArgument("adaptation pool has no target videos".into()));
    }
    run(model, pool, frames, config, true, rng)
}

/// Supervised training of the same heads with the reconstruction pipeline
/// disabled: lambda is 1 and no target clips are drawn.
pub fn train_source_only<R: Rng + ?Sized>(
    model: &mut LastModel<f32>,
    pool: &AdaptationPool,
    frames: &FrameStore,
    config: &AdaptConfig,
    rng: &mut R,
) -> Result<Vec<AdaptEpoch>> {
    let config = AdaptConfig {
        lambda: 1.0,
        ..config.clone()
    };
    run(model, pool, frames, &config, false, rng)
}

fn run<R: Rng + ?Sized>(
    model: &mut LastModel<f32>,
    pool: &AdaptationPool,
    frames: &FrameStore,
    config: &AdaptConfig,
    use_target: bool,
    rng: &mut R,
) -> Result<Vec<AdaptEpoch>> {
    config.validate()?;
    if pool.source().is_empty() {
        return Err(Error::InvalidArgument("adaptation pool has no source videos".into()));
    }
    let n = model.config.clip_len;
    if let Some(v) = pool.source().iter().find(|v| v.record.frame_count < n) {
        return Err(Error::VideoTooShort {
            video_id: v.record.video_id.clone(),
            frame_count: v.record.frame_count,
            clip_len: n,
        });
    }
    let mut source_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut target_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let steps_per_epoch = (pool.source().len() * config.clips_per_video).div_ceil(config.source_clips);
    let schedule = WarmupSchedule::new(&config.optimizer, config.epochs * steps_per_epoch);
    let mut adam = Adam::<f32>::new(config.optimizer);
    let mut grads = model.params.zeros_like();
    let mut cache = FeatureCache::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let draws: Vec<usize> = (0..pool.source().len())
            .flat_map(|v| std::iter::repeat_n(v, config.clips_per_video))
            .collect();
        let batches = shuffled_batches(draws.len(), config.source_clips, 1, &mut source_rng);
        let mut sums = [0.0f64; 3];
        let mut correct = 0;
        for batch in &batches {
            let mut source = Vec::with_capacity(batch.len());
            for &i in batch {
                let v = draws[i];
                let offset = sample_offset(pool.source()[v].record.frame_count, n, &mut source_rng)?;
                source.push(cache.source(model, pool, frames, v, offset)?);
            }
            let mut target = Vec::new();
            if use_target {
                for _ in 0..config.target_clips {
                    let v = target_rng.random_range(0..pool.target().len());
                    let offset = sample_offset(pool.target()[v].frame_count, n, &mut target_rng)?;
                    target.push(cache.target(model, pool, frames, v, offset)?);
                }
            }
            grads.fill_zero();
            let losses = last_objective(model, &source, &target, config.lambda, Some(&mut grads))?;
            ensure_finite(step, "L_last", losses.total)?;
            optimizer_step(&mut model.params, &grads, &mut adam, schedule.lr(step), TrainPhase::Adapt);
            step += 1;
            sums[0] += losses.cls;
            sums[1] += losses.rec;
            sums[2] += losses.total;
            correct += losses.correct;
        }
        let k = batches.len() as f64;
        let record = AdaptEpoch {
            epoch,
            l_cls: sums[0] / k,
            l_rec: sums[1] / k,
            l_last: sums[2] / k,
            source_acc: correct as f64 / draws.len() as f64,
        };
        info!(
            epoch,
            l_cls = record.l_cls,
            l_rec = record.l_rec,
            l_last = record.l_last,
            acc = record.source_acc,
            "adapt epoch"
        );
        history.push(record);
    }
    Ok(history)
}

/// Stacks clip-level class probabilities `(batch, 2)` for a set of latent vectors.
pub fn head_probabilities<T: Real>(model: &LastModel<T>, zs: ArrayView2<T>) -> Array2<T> {
    let h = model.params.adaptive.forward(zs);
    let mut logits = model.params.classifier.forward(h.view());
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let p = crate::model::softmax(row.view());
        row.assign(&p);
    }
    logits
}
