//! Pieces shared by the pretraining and adaptation loops.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ParameterStore, TrainPhase};
use crate::nn::{Adam, Real};

/// One Adam update of the groups trainable in `phase`. Frozen groups are
/// never handed to the optimizer, so their bytes cannot change.
pub fn optimizer_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    adam: &mut Adam<T>,
    lr: f64,
    phase: TrainPhase,
) {
    let mut grad_map = BTreeMap::new();
    for &group in phase.trainable_groups() {
        grad_map.extend(grads.group_tensors(group));
    }
    let tensors = params
        .named_tensors_mut()
        .into_iter()
        .filter(|(group, _, _)| phase.is_trainable(*group))
        .map(|(_, name, t)| (name, t))
        .collect();
    adam.step(lr, tensors, &grad_map);
}

pub fn ensure_finite(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Shuffles `0..n` and cuts it into batches of at most `size`; a trailing
/// batch smaller than `min_last` is merged into the one before it.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, size: usize, min_last: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_last) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

/// Generator for one stage of a run: the run seed selects the key and
/// `stream` keeps stages (init, pool, pretraining, adaptation) independent.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes a header line plus one comma-separated line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamGroup};
    use crate::nn::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = shuffled_batches(9, 4, 2, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(shuffled_batches(2, 32, 2, &mut rng).len(), 1);
    }

    #[test]
    fn step_leaves_frozen_groups_alone() {
        let cfg = ModelConfig::desk_reduced();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParameterStore::<f32>::init(&cfg, &mut rng);
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (_, _, mut t) in grads.named_tensors_mut() {
            t.fill(1.0);
        }
        let mut adam = Adam::new(AdamConfig::default());
        optimizer_step(&mut params, &grads, &mut adam, 1e-3, TrainPhase::Adapt);
        for g in ParamGroup::ALL {
            let same = params.group_hash(g) == before.group_hash(g);
            assert_eq!(same, !TrainPhase::Adapt.is_trainable(g), "{g}");
        }
    }
}
