//! Real-only initialisation of the backbone: clip-level contrastive learning
//! plus latent reconstruction of the per-frame features.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::{Array1, Array4, ArrayView1, ArrayView4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::data::{DatasetManifest, FrameStore, Label};
use crate::error::{Error, Result};
use crate::model::{LastModel, ParameterStore, TrainPhase};
use crate::nn::{Adam, AdamConfig, Real, WarmupSchedule};
use crate::train::{ensure_finite, optimizer_step, shuffled_batches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Weight of the contrastive term.
    pub lambda1: f64,
    /// Weight of the reconstruction term.
    pub lambda2: f64,
    pub temperature: f64,
    /// Lower clamp on the product of norms in cosine similarity.
    pub sim_eps: f64,
    /// Videos per batch; each contributes two clips.
    pub videos_per_batch: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Block gradients through the reconstruction target.
    pub detach_target: bool,
    /// Mean inter-video similarity above which a collapse warning is logged.
    pub collapse_warn: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            temperature: 0.5,
            sim_eps: 1e-8,
            videos_per_batch: 32,
            epochs: 100,
            optimizer: AdamConfig::default(),
            detach_target: true,
            collapse_warn: 0.95,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.videos_per_batch < 2 {
            return Err(Error::Config("videos_per_batch must be at least 2".into()));
        }
        Ok(())
    }
}

/// `(1/n) * sum_i ||t*_i - t_i||_1` over the `n` frames.
pub fn reconstruction_loss<T: Real>(t_star: ArrayView4<T>, t: ArrayView4<T>) -> Result<T> {
    check_same_shape(&t_star, &t)?;
    let n = T::from_usize(t.dim().0).expect("frame count");
    let total = Zip::from(&t_star).and(&t).fold(T::zero(), |acc, &a, &b| acc + (a - b).abs());
    Ok(total / n)
}

/// Loss and its gradient with respect to `t_star` (the gradient with
/// respect to `t` is the negation). Subgradient 0 where the entries agree.
pub fn reconstruction_loss_grad<T: Real>(t_star: ArrayView4<T>, t: ArrayView4<T>) -> Result<(T, Array4<T>)> {
    let loss = reconstruction_loss(t_star, t)?;
    let inv_n = T::one() / T::from_usize(t.dim().0).expect("frame count");
    let grad = Zip::from(&t_star).and(&t).map_collect(|&a, &b| {
        if a > b {
            inv_n
        } else if a < b {
            -inv_n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

fn check_same_shape<T>(a: &ArrayView4<T>, b: &ArrayView4<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "reconstruction has shape {:?}, target has shape {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `a.b / max(|a| |b|, eps)`.
pub fn cosine_sim<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>, eps: f64) -> T {
    let denom = (norm(a) * norm(b)).max(T::lit(eps));
    a.dot(&b) / denom
}

fn norm<T: Real>(a: ArrayView1<T>) -> T {
    a.dot(&a).sqrt()
}

/// Validates the pairing and returns, for each clip, the index of its positive.
fn positive_index<K: Eq + Hash>(ids: &[K]) -> Result<Vec<usize>> {
    let mut by_id: HashMap<&K, Vec<usize>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    if by_id.values().any(|v| v.len() != 2) {
        return Err(Error::InvalidArgument(
            "every video must contribute exactly two clips to a contrastive batch".into(),
        ));
    }
    if by_id.len() < 2 {
        return Err(Error::InvalidArgument("contrastive batch needs at least two videos".into()));
    }
    let mut pos = vec![0; ids.len()];
    for v in by_id.values() {
        pos[v[0]] = v[1];
        pos[v[1]] = v[0];
    }
    Ok(pos)
}

/// Mean over all `2M` anchors of
/// `-log(exp(s(a,p)/tau) / sum_{j != a} exp(s(a,j)/tau))`, where `p` is the
/// other clip of the anchor's video and every clip of another video is a negative.
pub fn contrastive_loss<T: Real, K: Eq + Hash>(z: &[Array1<T>], ids: &[K], temperature: f64, eps: f64) -> Result<T> {
    contrastive_core(z, ids, temperature, eps, false).map(|(l, _)| l)
}

/// The loss term of a single anchor against its positive and an explicit
/// list of negatives. [`contrastive_loss`] is the mean of this term over
/// every clip in the batch.
pub fn contrastive_anchor_loss<T: Real>(
    anchor: ArrayView1<T>,
    positive: ArrayView1<T>,
    negatives: &[ArrayView1<T>],
    temperature: f64,
    eps: f64,
) -> T {
    let tau = T::lit(temperature);
    let s_pos = cosine_sim(anchor, positive, eps) / tau;
    let logits: Vec<T> = std::iter::once(s_pos)
        .chain(negatives.iter().map(|n| cosine_sim(anchor, n.view(), eps) / tau))
        .collect();
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() - s_pos
}

/// Loss and gradient with respect to every embedding.
pub fn contrastive_loss_grad<T: Real, K: Eq + Hash>(
    z: &[Array1<T>],
    ids: &[K],
    temperature: f64,
    eps: f64,
) -> Result<(T, Vec<Array1<T>>)> {
    contrastive_core(z, ids, temperature, eps, true)
}

fn contrastive_core<T: Real, K: Eq + Hash>(
    z: &[Array1<T>],
    ids: &[K],
    temperature: f64,
    eps: f64,
    with_grad: bool,
) -> Result<(T, Vec<Array1<T>>)> {
    if z.len() != ids.len() {
        return Err(Error::InvalidArgument(format!("{} embeddings but {} video ids", z.len(), ids.len())));
    }
    let pos = positive_index(ids)?;
    let m = z.len();
    let tau = T::lit(temperature);
    let eps_t = T::lit(eps);
    let norms: Vec<T> = z.iter().map(|v| norm(v.view())).collect();
    let mut sim = vec![T::zero(); m * m];
    for i in 0..m {
        for j in i + 1..m {
            let s = z[i].dot(&z[j]) / (norms[i] * norms[j]).max(eps_t);
            sim[i * m + j] = s;
            sim[j * m + i] = s;
        }
    }
    let count = T::from_usize(m).expect("batch size");
    let mut loss = T::zero();
    // dL/ds(i, j) accumulated from both anchors that see the pair.
    let mut g = vec![T::zero(); m * m];
    for a in 0..m {
        let row: Vec<T> = (0..m).filter(|&j| j != a).map(|j| sim[a * m + j] / tau).collect();
        let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - sim[a * m + pos[a]] / tau;
        if with_grad {
            for j in (0..m).filter(|&j| j != a) {
                let p = (sim[a * m + j] / tau - lse).exp();
                let target = if j == pos[a] { T::one() } else { T::zero() };
                g[a * m + j] += (p - target) / (tau * count);
            }
        }
    }
    loss /= count;
    if !with_grad {
        return Ok((loss, Vec::new()));
    }
    let mut grads: Vec<Array1<T>> = z.iter().map(|v| Array1::zeros(v.len())).collect();
    for i in 0..m {
        for j in i + 1..m {
            let coef = g[i * m + j] + g[j * m + i];
            let prod = norms[i] * norms[j];
            if prod > eps_t {
                let s = sim[i * m + j];
                let (ni2, nj2) = (norms[i] * norms[i], norms[j] * norms[j]);
                Zip::from(&mut grads[i]).and(&z[i]).and(&z[j]).for_each(|g, &zi, &zj| {
                    *g += coef * (zj / prod - s * zi / ni2);
                });
                Zip::from(&mut grads[j]).and(&z[j]).and(&z[i]).for_each(|g, &zj, &zi| {
                    *g += coef * (zi / prod - s * zj / nj2);
                });
            } else {
                grads[i].scaled_add(coef / eps_t, &z[j]);
                grads[j].scaled_add(coef / eps_t, &z[i]);
            }
        }
    }
    Ok((loss, grads))
}

/// Mean cosine similarity over pairs of clips from different videos.
pub fn mean_cross_video_similarity<T: Real, K: Eq>(z: &[Array1<T>], ids: &[K], eps: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            if ids[i] != ids[j] {
                total += cosine_sim(z[i].view(), z[j].view(), eps).to_f64().expect("finite");
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

pub fn init_loss<T: Real>(l_con: T, l_rec: T, lambda1: f64, lambda2: f64) -> T {
    T::lit(lambda1) * l_con + T::lit(lambda2) * l_rec
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitLosses {
    pub con: f64,
    pub rec: f64,
    pub total: f64,
    pub mean_pairwise_sim: f64,
}

/// Evaluates the initialisation objective on a batch of clips and, when
/// `grads` is given, accumulates its gradient.
///
/// `ids[i]` names the video of `clips[i]`. Reconstruction targets are the
/// clip's own features unless `fixed_targets` supplies them; with fixed
/// targets no gradient flows into the target regardless of `detach_target`.
pub fn init_objective<T: Real>(
    model: &LastModel<T>,
    clips: &[ArrayView4<T>],
    ids: &[usize],
    config: &PretrainConfig,
    fixed_targets: Option<&[Array4<T>]>,
    grads: Option<&mut ParameterStore<T>>,
) -> Result<InitLosses> {
    if clips.len() != ids.len() {
        return Err(Error::InvalidArgument(format!("{} clips but {} ids", clips.len(), ids.len())));
    }
    if let Some(t) = fixed_targets {
        if t.len() != clips.len() {
            return Err(Error::InvalidArgument("one fixed target per clip required".into()));
        }
    }
    let count = T::from_usize(clips.len()).expect("batch size");
    let lambda2 = T::lit(config.lambda2);
    match grads {
        None => {
            let mut zs = Vec::with_capacity(clips.len());
            let mut rec = T::zero();
            for (i, clip) in clips.iter().enumerate() {
                let (features, z) = model.backbone(clip.view())?;
                let target = fixed_targets.map(|t| t[i].view()).unwrap_or(features.view());
                rec += reconstruction_loss(model.reconstruct(z.view()).view(), target)?;
                zs.push(z);
            }
            let con = contrastive_loss(&zs, ids, config.temperature, config.sim_eps)?;
            let rec = rec / count;
            Ok(summarise(con, rec, &zs, ids, config))
        }
        Some(grads) => {
            let traces = clips
                .iter()
                .map(|c| model.backbone_traced(c.view()))
                .collect::<Result<Vec<_>>>()?;
            let zs: Vec<Array1<T>> = traces.iter().map(|t| t.z.clone()).collect();
            let (con, dz_con) = contrastive_loss_grad(&zs, ids, config.temperature, config.sim_eps)?;
            let mut rec = T::zero();
            let lambda1 = T::lit(config.lambda1);
            for (i, trace) in traces.iter().enumerate() {
                let (t_star, rcache) = model.reconstruct_traced(trace.z.view());
                let target = fixed_targets.map(|t| t[i].view()).unwrap_or(trace.features.view());
                let (l, mut d_star) = reconstruction_loss_grad(t_star.view(), target)?;
                rec += l;
                d_star.mapv_inplace(|v| v * lambda2 / count);
                let mut dz = model.reconstruct_backward(&rcache, d_star.view(), grads);
                dz.scaled_add(lambda1, &dz_con[i]);
                let direct = (fixed_targets.is_none() && !config.detach_target).then(|| d_star.mapv(|v| -v));
                model.backbone_backward(trace, dz.view(), direct.as_ref().map(|d| d.view()), grads);
            }
            let rec = rec / count;
            Ok(summarise(con, rec, &zs, ids, config))
        }
    }
}

fn summarise<T: Real>(con: T, rec: T, zs: &[Array1<T>], ids: &[usize], config: &PretrainConfig) -> InitLosses {
    let total = init_loss(con, rec, config.lambda1, config.lambda2);
    InitLosses {
        con: con.to_f64().expect("finite"),
        rec: rec.to_f64().expect("finite"),
        total: total.to_f64().expect("finite"),
        mean_pairwise_sim: mean_cross_video_similarity(zs, ids, config.sim_eps),
    }
}

/// One line of the pretraining log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_con: f64,
    pub l_rec: f64,
    pub l_init: f64,
    pub lr: f64,
    pub mean_pairwise_sim: f64,
}

impl PretrainEpoch {
    pub const CSV_HEADER: &'static str = "epoch,L_con,L_rec,L_init,lr,mean_pairwise_sim";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8e},{:.8}",
            self.epoch, self.l_con, self.l_rec, self.l_init, self.lr, self.mean_pairwise_sim
        )
    }
}

/// Checks that every record is labelled real and long enough for two
/// distinct clips.
pub fn check_pretrain_manifest(manifest: &DatasetManifest, clip_len: usize) -> Result<()> {
    if let Some(bad) = manifest.records.iter().find(|r| r.label != Some(Label::Real)) {
        return Err(Error::InvalidManifest(format!(
            "pretrain must be real-only: video {} is not labelled real",
            bad.video_id
        )));
    }
    if manifest.len() < 2 {
        return Err(Error::InvalidManifest("pretraining needs at least two videos".into()));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.frame_count < clip_len + 1) {
        return Err(Error::VideoTooShort {
            video_id: r.video_id.clone(),
            frame_count: r.frame_count,
            clip_len: clip_len + 1,
        });
    }
    Ok(())
}

/// Optimises the pretrain-trainable groups in place and returns the per-epoch
/// history. The adaptive layer and classifier are never touched.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut LastModel<f32>,
    manifest: &DatasetManifest,
    frames: &FrameStore,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<PretrainEpoch>> {
    config.validate()?;
    let n = model.config.clip_len;
    check_pretrain_manifest(manifest, n)?;
    let batches_per_epoch = manifest.len().div_ceil(config.videos_per_batch);
    let schedule = WarmupSchedule::new(&config.optimizer, config.epochs * batches_per_epoch);
    let mut adam = Adam::<f32>::new(config.optimizer);
    let mut grads = model.params.zeros_like();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut sums = [0.0f64; 4];
        let mut lr = 0.0;
        let batches = shuffled_batches(manifest.len(), config.videos_per_batch, 2, rng);
        for batch in &batches {
            let mut clips = Vec::with_capacity(batch.len() * 2);
            let mut ids = Vec::with_capacity(batch.len() * 2);
            for &v in batch {
                let (a, b) = frames.sample_positive_pair(&manifest.records[v], n, rng)?;
                clips.push(a.frames);
                clips.push(b.frames);
                ids.extend([v, v]);
            }
            let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
            grads.fill_zero();
            let losses = init_objective(model, &views, &ids, config, None, Some(&mut grads))?;
            ensure_finite(step, "L_init", losses.total)?;
            lr = schedule.lr(step);
            optimizer_step(&mut model.params, &grads, &mut adam, lr, TrainPhase::Pretrain);
            step += 1;
            for (s, v) in sums.iter_mut().zip([losses.con, losses.rec, losses.total, losses.mean_pairwise_sim]) {
                *s += v;
            }
        }
        let k = batches.len() as f64;
        let record = PretrainEpoch {
            epoch,
            l_con: sums[0] / k,
            l_rec: sums[1] / k,
            l_init: sums[2] / k,
            lr,
            mean_pairwise_sim: sums[3] / k,
        };
        info!(
            epoch,
            l_con = record.l_con,
            l_rec = record.l_rec,
            l_init = record.l_init,
            sim = record.mean_pairwise_sim,
            "pretrain epoch"
        );
        if record.mean_pairwise_sim > config.collapse_warn {
            warn!(
                epoch,
                sim = record.mean_pairwise_sim,
                "mean inter-video similarity above collapse threshold"
            );
        }
        history.push(record);
    }
    Ok(history)
}
