//! Brute-force references for the ranking metrics.

use last_core::data::Label;
use last_core::eval::{compute_metrics, VideoScore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of (real, fake) pairs where the fake scores higher, ties counting one half.
pub fn pairwise_auc(reals: &[f64], fakes: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &f in fakes {
        for &r in reals {
            wins += if f > r {
                1.0
            } else if f == r {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (reals.len() * fakes.len()) as f64
}

/// EER from a threshold grid with spacing 1e-4 over [0, 1.0001]. Scores are
/// expected to be multiples of 1e-3 so every distinct score lies on the grid.
pub fn grid_eer(reals: &[f64], fakes: &[f64]) -> f64 {
    let rates = |t: f64| {
        let fpr = reals.iter().filter(|&&s| s >= t - 1e-9).count() as f64 / reals.len() as f64;
        let fnr = fakes.iter().filter(|&&s| s < t - 1e-9).count() as f64 / fakes.len() as f64;
        (fpr, fnr)
    };
    let mut prev = rates(0.0);
    for k in 0..=10_001u32 {
        let (fpr, fnr) = rates(k as f64 * 1e-4);
        let d = fpr - fnr;
        if d <= 0.0 {
            let pd = prev.0 - prev.1;
            if d == 0.0 || pd == d {
                return fpr;
            }
            let alpha = pd / (pd - d);
            return prev.0 + alpha * (fpr - prev.0);
        }
        prev = (fpr, fnr);
    }
    panic!("no crossing on the grid")
}

pub fn scores(reals: &[f64], fakes: &[f64]) -> Vec<VideoScore> {
    let mk = |i: usize, s: f64, label| VideoScore::from_clips(format!("v{i}"), Some(label), vec![s]).unwrap();
    reals
        .iter()
        .enumerate()
        .map(|(i, &s)| mk(i, s, Label::Real))
        .chain(fakes.iter().enumerate().map(|(i, &s)| mk(1000 + i, s, Label::Fake)))
        .collect()
}

/// A random instance of at most `max_videos` videos with both classes and
/// scores on the 1e-3 lattice.
pub fn random_instance(rng: &mut ChaCha8Rng, max_videos: usize) -> (Vec<f64>, Vec<f64>) {
    let total = rng.random_range(2..=max_videos);
    let n_real = rng.random_range(1..total);
    // A coarse lattice for some instances makes ties common.
    let levels = if rng.random_bool(0.3) { 10 } else { 1000 };
    let mut draw = || (rng.random_range(0..=levels) * (1000 / levels)) as f64 / 1000.0;
    let reals = (0..n_real).map(|_| draw()).collect();
    let fakes = (0..total - n_real).map(|_| draw()).collect();
    (reals, fakes)
}

/// Largest deviation between `compute_metrics` and the oracles, in percent,
/// over `instances` random instances.
pub fn metric_oracle_deviation(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auc_dev, mut eer_dev) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (reals, fakes) = random_instance(&mut rng, 32);
        let report = compute_metrics(&scores(&reals, &fakes), "oracle", None).unwrap();
        auc_dev = auc_dev.max((report.auc.unwrap() - 100.0 * pairwise_auc(&reals, &fakes)).abs());
        eer_dev = eer_dev.max((report.eer.unwrap() - 100.0 * grid_eer(&reals, &fakes)).abs());
    }
    (auc_dev, eer_dev)
}
