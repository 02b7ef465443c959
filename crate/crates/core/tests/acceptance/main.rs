//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

#[path = "../common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::metric_oracle::{metric_oracle_deviation, scores};
use common::oracles::loss_cases;
use common::perturb_checks::{noise_sigmas, pixel_blocks_exact};
use common::{check_init_gradients, check_last_gradients, desk, f64_model, paired_clips, synth, GradReport};
use last_core::adapt::{SourceFeature, TargetFeature};
use last_core::checkpoint::Checkpoint;
use last_core::data::{make_synthetic_dataset, DomainStyle, ForgeryFamily, FrameStore, Label, ManifestRole, SyntheticSpec};
use last_core::eval::{
    compute_metrics, evaluate_settings, kind_means, robustness_table, run_protocol, score_manifest, EvalSettings,
    PerturbationSet, ProtocolOutcome, ProtocolSettings, ProtocolSpec, RobustnessRow, Variant, ROBUSTNESS_TABLE_HEADER,
};
use last_core::model::{LastModel, ModelConfig, ParamGroup, TrainPhase};
use last_core::perturb::{perturbation_grid, PerturbationKind};
use last_core::pretrain::PretrainConfig;
use rand::{Rng, SeedableRng};

const SHIFT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const FRACTIONS: [f64; 3] = [0.0, 0.5, 1.0];
const SOURCE: &str = "source";
const TARGET_EVAL: &str = "target-eval";

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2}. {name} [{secs:.0}s]: {detail}");
    results.push(outcome.is_ok());
}

fn loss_oracles() -> Outcome {
    let cases = loss_cases();
    let failing: Vec<_> = cases.iter().filter(|c| !c.passes()).map(|c| c.name).collect();
    let closed = (1.0 + (-2.0f64).exp()).ln();
    let digits = (closed - 0.12693).abs() < 1e-5;
    ensure(
        failing.is_empty() && digits,
        format!("{} cases, failing {failing:?}, ln(1+e^-2) = {closed:.6}", cases.len()),
    )
}

fn gradient_checks() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let frames = FrameStore::new();
    let config = ModelConfig::desk_reduced();
    let step = 1e-3;

    let reals = synth(dir.path(), "gc", 2, 24, vec![ForgeryFamily::Seam], 5);
    let (clips, ids) = paired_clips(&reals, &frames, config.clip_len, 2, 1);
    let mut model = f64_model(&config, 2);
    let targets: Vec<_> = clips.iter().map(|c| model.backbone(c.view()).unwrap().0).collect();
    let init = check_init_gradients(&mut model, &clips, &ids, &PretrainConfig::default(), Some(&targets), 50, step, 11);

    let source = synth(dir.path(), "src", 4, 24, vec![ForgeryFamily::Seam], 7);
    let target = synth(dir.path(), "tgt", 2, 24, vec![ForgeryFamily::Flicker], 8);
    let mut model = f64_model(&config, 9);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    model.params.adaptive.weight.mapv_inplace(|w| w + 0.05 * rng.random_range(-1.0..1.0));
    let (src_clips, _) = paired_clips(&source, &frames, config.clip_len, 4, 13);
    let src: Vec<_> = src_clips
        .iter()
        .enumerate()
        .map(|(i, c)| SourceFeature {
            z: model.backbone(c.view()).unwrap().1,
            label: source.records[i / 2].label.unwrap_or(Label::Real),
        })
        .collect();
    let (tgt_clips, _) = paired_clips(&target, &frames, config.clip_len, 2, 14);
    let tgt: Vec<_> = tgt_clips
        .iter()
        .map(|c| {
            let (features, z) = model.backbone(c.view()).unwrap();
            TargetFeature { z, features }
        })
        .collect();
    let last = check_last_gradients(&mut model, &src, &tgt, 0.5, 100, step, 15);

    let ok = |r: &GradReport| r.checked >= 200 && r.max_rel_error <= 1e-3;
    ensure(
        ok(&init) && ok(&last),
        format!(
            "L_init {} coords max rel {:.2e}, L_last {} coords max rel {:.2e}",
            init.checked, init.max_rel_error, last.checked, last.max_rel_error
        ),
    )
}

fn metric_oracle() -> Outcome {
    let (auc_dev, eer_dev) = metric_oracle_deviation(1000, 17);
    let r = compute_metrics(&scores(&[0.1, 0.2, 0.3, 0.4], &[0.35, 0.6, 0.7, 0.8]), "hand", None).unwrap();
    ensure(
        auc_dev <= 1e-6 && eer_dev <= 1e-6 && r.auc == Some(93.75) && r.eer == Some(25.0),
        format!("max |dAUC| {auc_dev:.1e}, max |dEER| {eer_dev:.1e}, hand AUC {:?} EER {:?}", r.auc, r.eer),
    )
}

/// Datasets of the synthetic domain shift: seam fakes in clean footage as the
/// labelled source, flicker fakes in compressed footage as the target.
struct ShiftData {
    _dir: tempfile::TempDir,
    root: PathBuf,
    spec: ProtocolSpec,
}

fn shift_data() -> ShiftData {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let make = |name: &str, n, families: Vec<ForgeryFamily>, style, seed, role| {
        let spec = SyntheticSpec {
            name: name.into(),
            n_videos: n,
            forgery_families: families,
            domain_style: style,
            seed,
            role,
            ..SyntheticSpec::default()
        };
        make_synthetic_dataset(&spec, &root.join(name)).unwrap();
        root.join(name).join("manifest.tsv")
    };
    let reals = make("reals", desk::PRETRAIN_VIDEOS, Vec::new(), DomainStyle::Clean, 2, ManifestRole::Pretrain);
    let source = make(SOURCE, 100, vec![ForgeryFamily::Seam], DomainStyle::Clean, 1, ManifestRole::Source);
    let target = make("target", 100, vec![ForgeryFamily::Flicker], DomainStyle::Compressed, 3, ManifestRole::Target);
    let eval = make(TARGET_EVAL, 40, vec![ForgeryFamily::Flicker], DomainStyle::Compressed, 4, ManifestRole::Eval);
    let spec = ProtocolSpec {
        name: "shift".into(),
        seeds: SHIFT_SEEDS.to_vec(),
        pretrain_manifest: Some(reals),
        pretrain_fractions: FRACTIONS.to_vec(),
        source_manifest: source.clone(),
        target_manifest: Some(target),
        target_ratio: 0.1,
        variants: vec![Variant::Adapt, Variant::SourceOnly],
        eval_manifests: vec![eval, source],
        perturbations: PerturbationSet::None,
        n_eval_clips: 4,
        perturbation_seed: 0,
    };
    ShiftData { _dir: dir, root, spec }
}

fn desk_settings() -> ProtocolSettings {
    ProtocolSettings {
        model: ModelConfig::desk_reduced(),
        pretrain: desk::pretrain_config(),
        adapt: desk::head_config(),
    }
}

fn cell_dir(root: &Path, seed: u64, fraction: f64) -> PathBuf {
    root.join("out").join(format!("seed{seed}")).join(format!("frac{fraction:.2}"))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn clean_aucs(outcome: &ProtocolOutcome, fraction: f64, variant: Variant, eval: &str) -> Result<Vec<f64>, String> {
    SHIFT_SEEDS
        .iter()
        .map(|&s| {
            outcome
                .clean_auc(s, fraction, variant, eval)
                .ok_or_else(|| format!("no {} AUC for seed {s} fraction {fraction}", variant.name()))
        })
        .collect()
}

fn freeze_contract(root: &Path) -> Outcome {
    let mut moved = Vec::new();
    for &seed in &SHIFT_SEEDS {
        let dir = cell_dir(root, seed, 1.0);
        let base = Checkpoint::load(&dir.join("pretrain.ckpt")).map_err(|e| e.to_string())?;
        let adapted = Checkpoint::load(&dir.join("adapt.ckpt")).map_err(|e| e.to_string())?;
        for g in ParamGroup::BACKBONE {
            if base.group_hash(g) != adapted.group_hash(g) {
                moved.push(format!("seed{seed}:{g}"));
            }
        }
        for g in [ParamGroup::Adaptive, ParamGroup::Classifier] {
            if base.group_hash(g) == adapted.group_hash(g) {
                moved.push(format!("seed{seed}:{g} unchanged"));
            }
        }
    }
    let groups: Vec<_> = TrainPhase::Adapt.trainable_groups().iter().map(|g| g.name()).collect();
    let desk = LastModel::<f32>::new(ModelConfig::desk_reduced(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let paper = LastModel::<f32>::new(ModelConfig::paper_default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (desk_n, paper_n) = (desk.params.trainable_count(TrainPhase::Adapt), paper.params.trainable_count(TrainPhase::Adapt));
    ensure(
        moved.is_empty() && groups == ["adaptive", "classifier"],
        format!(
            "{} seeds x 10 epochs, trainable {groups:?}, count {desk_n} (desk) / {paper_n} (paper dims), violations {moved:?}",
            SHIFT_SEEDS.len()
        ),
    )
}

fn overfit_sanity(root: &Path, frames: &FrameStore, source: &Path) -> Outcome {
    let manifest = last_core::data::load_manifest(source, ModelConfig::desk_reduced().clip_len).map_err(|e| e.to_string())?;
    let mut accs = Vec::new();
    for &seed in &SHIFT_SEEDS[..3] {
        let ckpt = Checkpoint::load(&cell_dir(root, seed, 1.0).join("source-only.ckpt")).map_err(|e| e.to_string())?;
        let model = ckpt.model().map_err(|e| e.to_string())?;
        let scored = score_manifest(&model, &manifest, frames, 4, None).map_err(|e| e.to_string())?;
        accs.push(compute_metrics(&scored, SOURCE, None).map_err(|e| e.to_string())?.acc);
    }
    let m = mean(&accs);
    ensure(m >= 95.0, format!("train video ACC per seed {accs:.2?}, mean {m:.2} (need >= 95)"))
}

fn adaptation_benefit(outcome: &ProtocolOutcome) -> Outcome {
    let adapted = clean_aucs(outcome, 1.0, Variant::Adapt, TARGET_EVAL)?;
    let plain = clean_aucs(outcome, 1.0, Variant::SourceOnly, TARGET_EVAL)?;
    let gain = mean(&adapted) - mean(&plain);
    ensure(
        gain >= 3.0,
        format!(
            "target AUC adapt {adapted:.2?} mean {:.2}, source-only {plain:.2?} mean {:.2}, gain {gain:+.2} (need >= +3)",
            mean(&adapted),
            mean(&plain)
        ),
    )
}

fn scale_trend(outcome: &ProtocolOutcome) -> Outcome {
    let means = FRACTIONS
        .iter()
        .map(|&f| clean_aucs(outcome, f, Variant::Adapt, TARGET_EVAL).map(|v| mean(&v)))
        .collect::<Result<Vec<_>, _>>()?;
    let monotone = means.windows(2).all(|w| w[1] >= w[0] - 1.0);
    ensure(monotone, format!("mean target AUC at pretrain fractions {FRACTIONS:?}: {means:.2?}"))
}

fn robustness_harness(root: &Path, frames: &FrameStore, eval: &Path) -> Outcome {
    let manifest = last_core::data::load_manifest(eval, ModelConfig::desk_reduced().clip_len).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&cell_dir(root, 0, 1.0).join("adapt.ckpt")).map_err(|e| e.to_string())?;
    let model = ckpt.model().map_err(|e| e.to_string())?;
    let report_dir = root.join("robustness");
    let settings = EvalSettings {
        n_eval_clips: 2,
        perturbation_seed: 0,
    };
    let results = evaluate_settings(&model, &manifest, frames, &perturbation_grid(), &settings, "acceptance", &report_dir, "adapt")
        .map_err(|e| e.to_string())?;
    let files = fs::read_dir(&report_dir).map_err(|e| e.to_string())?.count();
    let row = RobustnessRow {
        method: "adapt".into(),
        clean_auc: results[0].1.auc,
        kind_auc: kind_means(&results),
    };
    let table = robustness_table(&[row]);
    let mut lines = table.lines();
    let header_ok = lines.next() == Some(ROBUSTNESS_TABLE_HEADER);
    let cells = lines.next().map(|l| l.split(',').count()).unwrap_or(0);
    let kinds = kind_means(&results).len();

    let noise_ok = noise_sigmas().iter().all(|&(_, sigma, measured)| (measured - sigma).abs() <= 0.05 * sigma);
    let pixel_ok = pixel_blocks_exact().iter().all(|&(_, _, exact)| exact);
    ensure(
        results.len() == 36 && files == 36 && header_ok && cells == 11 && kinds == PerturbationKind::ALL.len() && noise_ok && pixel_ok,
        format!(
            "{} settings, {files} report files, {kinds} kinds, table row {cells} columns, noise sigma ok {noise_ok}, pixel period ok {pixel_ok}; {}",
            results.len(),
            table.lines().nth(1).unwrap_or("")
        ),
    )
}

fn non_collapse(root: &Path) -> Outcome {
    let negatives = 2 * desk::pretrain_config().videos_per_batch - 2;
    let bound = (1.0 + negatives as f64).ln() - 0.05;
    let mut finals = Vec::new();
    for &seed in &SHIFT_SEEDS {
        let log = fs::read_to_string(cell_dir(root, seed, 1.0).join("pretrain_log.csv")).map_err(|e| e.to_string())?;
        let last = log.lines().last().ok_or("empty pretraining log")?;
        let cols: Vec<f64> = last.split(',').map(|v| v.parse().unwrap()).collect();
        finals.push((cols[1], cols[5]));
    }
    let ok = finals.iter().all(|&(con, sim)| sim < 0.95 && con < bound);
    ensure(
        ok,
        format!(
            "{} real videos, final (L_con, mean inter-video cos) per seed {finals:.3?}; bounds L_con < {bound:.3}, cos < 0.95",
            desk::PRETRAIN_VIDEOS
        ),
    )
}

fn reproducibility(frames: &FrameStore) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let reals = synth(dir.path(), "reals", 8, 24, Vec::new(), 40)
        .with_role(ManifestRole::Pretrain)
        .unwrap();
    reals.save(&dir.path().join("reals/manifest.tsv")).unwrap();
    synth(dir.path(), "src", 8, 24, vec![ForgeryFamily::Seam], 41);
    synth(dir.path(), "tgt", 8, 24, vec![ForgeryFamily::Flicker], 42);
    synth(dir.path(), "ev", 6, 24, vec![ForgeryFamily::Flicker], 43);
    let m = |n: &str| dir.path().join(n).join("manifest.tsv");
    let spec = ProtocolSpec {
        name: "repro".into(),
        seeds: vec![3],
        pretrain_manifest: Some(m("reals")),
        pretrain_fractions: vec![1.0],
        source_manifest: m("src"),
        target_manifest: Some(m("tgt")),
        target_ratio: 0.5,
        variants: vec![Variant::Adapt, Variant::SourceOnly],
        eval_manifests: vec![m("ev")],
        perturbations: PerturbationSet::List(vec!["noise:3".into(), "blur:2".into()]),
        n_eval_clips: 2,
        perturbation_seed: 9,
    };
    let mut settings = desk_settings();
    settings.pretrain.epochs = 2;
    settings.pretrain.videos_per_batch = 4;
    settings.adapt.epochs = 2;
    settings.adapt.clips_per_video = 2;
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for r in &runs {
        run_protocol(&spec, &settings, frames, r).map_err(|e| e.to_string())?;
    }
    let files = |root: &Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    };
    let (a, b) = (files(&runs[0]), files(&runs[1]));
    if a != b {
        return Err(format!("file trees differ: {a:?} vs {b:?}"));
    }
    let differing: Vec<_> = a
        .iter()
        .filter(|p| fs::read(runs[0].join(p)).unwrap() != fs::read(runs[1].join(p)).unwrap())
        .collect();
    let reports = a.iter().filter(|p| p.extension().is_some_and(|e| e == "txt")).count();
    ensure(
        differing.is_empty(),
        format!("{} files ({reports} metric reports) compared byte for byte, differing {differing:?}", a.len()),
    )
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let frames = FrameStore::new();
    run(&mut results, 1, "loss oracles", loss_oracles);
    run(&mut results, 2, "gradient checks", gradient_checks);
    run(&mut results, 4, "metric oracle equivalence", metric_oracle);

    // Criteria 3, 5, 6, 7, 8 and 9 share one protocol run over the domain
    // shift: every seed pretrains once per fraction and both head variants
    // start from that checkpoint.
    let data = shift_data();
    let start = Instant::now();
    let protocol = run_protocol(&data.spec, &desk_settings(), &frames, &data.root.join("out")).map_err(|e| e.to_string());
    println!("     shift protocol: {} cells in {:.0}s", protocol.as_ref().map_or(0, |o| o.cells.len()), start.elapsed().as_secs_f64());
    let shared = |f: &dyn Fn(&ProtocolOutcome) -> Outcome| match &protocol {
        Ok(o) => f(o),
        Err(e) => Err(format!("protocol failed: {e}")),
    };
    let root = data.root.clone();
    run(&mut results, 3, "freeze contract", || shared(&|_| freeze_contract(&root)));
    run(&mut results, 5, "overfit sanity", || shared(&|_| overfit_sanity(&root, &frames, &data.spec.source_manifest)));
    run(&mut results, 6, "adaptation benefit", || shared(&adaptation_benefit));
    run(&mut results, 7, "initialisation scale trend", || shared(&scale_trend));
    run(&mut results, 8, "robustness harness", || shared(&|_| robustness_harness(&root, &frames, &data.spec.eval_manifests[0])));
    run(&mut results, 9, "contrastive non-collapse", || shared(&|_| non_collapse(&root)));
    run(&mut results, 10, "reproducibility", || reproducibility(&frames));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
