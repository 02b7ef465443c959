//! Empirical checks of the corruption parameter tables.

use last_core::data::FrameClip;
use last_core::perturb::{apply_perturbation, Perturbation, PerturbationKind};
use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip(frames: Array4<f32>) -> FrameClip {
    FrameClip {
        video_id: "probe".into(),
        offset: 0,
        frames,
    }
}

/// `(severity, sigma, empirical std)` of the noise corruption on a mid-gray clip.
pub fn noise_sigmas() -> Vec<(u8, f64, f64)> {
    let gray = clip(Array4::from_elem((20, 64, 64, 3), 0.5));
    (1..=5)
        .map(|sev| {
            let p = Perturbation::new(PerturbationKind::Noise, sev).unwrap();
            let out = apply_perturbation(&gray, p, &mut ChaCha8Rng::seed_from_u64(sev as u64)).unwrap();
            let n = out.frames.len() as f64;
            let mean = out.frames.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = out.frames.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (sev, p.parameter(), var.sqrt())
        })
        .collect()
}

/// For every pixelation severity, whether each aligned `factor x factor`
/// block of a random clip is constant and equal to the input block mean.
pub fn pixel_blocks_exact() -> Vec<(u8, usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = clip(Array4::from_shape_fn((2, 64, 64, 3), |_| rng.random::<f32>()));
    (1..=5)
        .map(|sev| {
            let p = Perturbation::new(PerturbationKind::Pixel, sev).unwrap();
            let factor = p.parameter() as usize;
            let out = apply_perturbation(&input, p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut exact = true;
            for f in 0..2usize {
                for by in (0..64usize).step_by(factor) {
                    for bx in (0..64usize).step_by(factor) {
                        for ch in 0..3usize {
                            let region = s![f, by..(by + factor).min(64), bx..(bx + factor).min(64), ch];
                            let block = out.frames.slice(region);
                            let first = block[[0, 0]];
                            let mean = input.frames.slice(region).mean().unwrap();
                            exact &= block.iter().all(|&v| v == first) && (first - mean).abs() < 1e-5;
                        }
                    }
                }
            }
            (sev, factor, exact)
        })
        .collect()
}
