use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use last_core::checkpoint::Checkpoint;
use last_core::harness::{file_hash, RunConfig, CONFIG_FILE, INPUTS_FILE};

fn last(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_last"))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Renders a small real-only set and a small labelled set into `cwd/data`.
fn small_data(cwd: &Path) -> (PathBuf, PathBuf) {
    let base = ["--out", "."];
    ok(&last(cwd, &[&base[..], &["synth", "--name", "reals", "--videos", "4", "--families", "none", "--role", "pretrain"]].concat()));
    ok(&last(cwd, &[&base[..], &["synth", "--name", "mixed", "--videos", "4", "--data-seed", "5"]].concat()));
    (cwd.join("data/reals/manifest.tsv"), cwd.join("data/mixed/manifest.tsv"))
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = failed(&last(dir.path(), &["eval", "--checkpoint", "missing.ckpt", "--manifest", "m.tsv"]));
    assert!(err.contains("missing.ckpt"), "{err}");
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1, "{err}");
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    failed(&last(dir.path(), &["frobnicate"]));
    let err = failed(&last(dir.path(), &["--set", "adapt.lambda=2", "synth"]));
    assert!(err.contains("lambda"), "{err}");
    fs::write(dir.path().join("bad.cfg"), "pretrain.epochz = 3\n").unwrap();
    let err = failed(&last(dir.path(), &["--config", "bad.cfg", "synth"]));
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn help_lists_config_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&last(dir.path(), &["--help"]));
    for key in ["pretrain.epochs = 100", "adapt.lambda = 0.5", "pretrain.temperature = 0.5", "model.token_dim = 64"] {
        assert!(help.contains(key), "{key} missing from --help");
    }
    for cmd in ["synth", "pretrain", "adapt", "train-source-only", "eval", "robustness", "embed", "saliency", "protocol"] {
        assert!(help.contains(cmd), "{cmd} missing from --help");
    }
}

#[test]
fn pretrain_with_zero_epochs_returns_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let (reals, _) = small_data(dir.path());
    let reals = reals.to_str().unwrap();
    ok(&last(dir.path(), &["--out", "p", "--seed", "4", "pretrain", "--manifest", reals, "--epochs", "0"]));
    let init = Checkpoint::load(&dir.path().join("p/init.ckpt")).unwrap();
    let pre = Checkpoint::load(&dir.path().join("p/pretrain.ckpt")).unwrap();
    assert_eq!(init.params, pre.params);
    assert_eq!(pre.parent_hash.as_deref(), Some(init.content_hash().as_str()));

    // The run directory records the resolved config, the seed and input hashes.
    let saved = fs::read_to_string(dir.path().join("p").join(CONFIG_FILE)).unwrap();
    let resolved = RunConfig::parse(&saved).unwrap();
    assert_eq!(resolved.seed, 4);
    assert_eq!(resolved.pretrain.epochs, 0);
    assert_eq!(fs::read_to_string(dir.path().join("p/seed")).unwrap().trim(), "4");
    let inputs = fs::read_to_string(dir.path().join("p").join(INPUTS_FILE)).unwrap();
    assert!(inputs.contains(&file_hash(Path::new(reals)).unwrap()));
}

#[test]
fn stage_commands_chain_and_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let (reals, mixed) = small_data(cwd);
    let (reals, mixed) = (reals.to_str().unwrap(), mixed.to_str().unwrap());
    let small = ["--set", "pretrain.videos_per_batch=2", "--set", "adapt.source_clips=4", "--set", "adapt.clips_per_video=1"];
    ok(&last(cwd, &[&small[..], &["--out", "p", "pretrain", "--manifest", reals, "--epochs", "1"]].concat()));
    let ckpt = cwd.join("p/pretrain.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let before = file_hash(&ckpt).unwrap();

    let heads = ["--checkpoint", ckpt_s, "--source", mixed, "--epochs", "1"];
    ok(&last(cwd, &[&small[..], &["--out", "a", "adapt"], &heads[..], &["--target", mixed]].concat()));
    ok(&last(cwd, &[&small[..], &["--out", "s", "train-source-only"], &heads[..]].concat()));
    let adapted = Checkpoint::load(&cwd.join("a/adapt.ckpt")).unwrap();
    let plain = Checkpoint::load(&cwd.join("s/source-only.ckpt")).unwrap();
    let parent = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(adapted.params.backbone_hash(), parent.params.backbone_hash());
    assert_eq!(adapted.parent_hash.as_deref(), Some(parent.content_hash().as_str()));
    assert_ne!(adapted.params.heads_hash(), plain.params.heads_hash());
    assert!(cwd.join("a/adapt_log.csv").exists() && cwd.join("a/target_pool.txt").exists());

    let out = ok(&last(cwd, &["--out", "e", "eval", "--checkpoint", ckpt_s, "--manifest", mixed, "--perturb", "noise:2", "--clips", "1"]));
    assert!(out.contains("auc:"), "{out}");
    assert!(cwd.join("e/reports/eval__mixed__clean.txt").exists());
    assert!(cwd.join("e/reports/eval__mixed__noise-2.txt").exists());
    assert_eq!(fs::read_to_string(cwd.join("e/metrics.csv")).unwrap().lines().count(), 3);

    ok(&last(cwd, &["--out", "m", "embed", "--checkpoint", ckpt_s, "--manifest", mixed, "--layer", "h"]));
    let table = fs::read_to_string(cwd.join("m/embeddings_mixed_h.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert_eq!(table.lines().nth(1).unwrap().split('\t').count(), 4 + 64);

    ok(&last(cwd, &["--out", "g", "saliency", "--checkpoint", ckpt_s, "--manifest", mixed, "--video", "mixed-0001", "--offset", "2"]));
    let cells = fs::read_to_string(cwd.join("g/saliency_mixed-0001_2.tsv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 20 * 4 * 4);
    assert!(cwd.join("g/saliency_mixed-0001_2.png").exists());

    assert_eq!(file_hash(&ckpt).unwrap(), before, "input checkpoint was modified");
}

#[test]
fn robustness_writes_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let (reals, mixed) = small_data(cwd);
    ok(&last(cwd, &["--out", "p", "pretrain", "--manifest", reals.to_str().unwrap(), "--epochs", "0"]));
    let out = ok(&last(
        cwd,
        &["--out", "r", "--set", "eval.n_eval_clips=1", "robustness", "--checkpoint", "p/init.ckpt", "--manifest", mixed.to_str().unwrap()],
    ));
    let reports: Vec<_> = fs::read_dir(cwd.join("r/reports")).unwrap().collect();
    assert_eq!(reports.len(), 36);
    let table = fs::read_to_string(cwd.join("r/robustness.csv")).unwrap();
    assert_eq!(table, out);
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), last_core::eval::ROBUSTNESS_TABLE_HEADER);
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "init");
    assert_eq!(row.len(), 11);
    assert_eq!(fs::read_to_string(cwd.join("r/robustness_cells.csv")).unwrap().lines().count(), 37);
}

#[test]
fn ablation_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("ablation.cfg");
    ok(&last(dir.path(), &["protocol", cfg.to_str().unwrap()]));
    let run = dir.path().join("runs/ablation");
    for frac in ["frac0.00", "frac1.00"] {
        let cell = run.join("seed0").join(frac);
        for f in ["pretrain.ckpt", "adapt.ckpt", "source-only.ckpt", "adapt_log.csv", "source-only_log.csv"] {
            assert!(cell.join(f).exists(), "{frac}/{f}");
        }
        assert!(cell.join("reports/adapt__test__clean.txt").exists());
        assert!(cell.join("reports/source-only__test__clean.txt").exists());
    }
    assert!(run.join("seed0/frac1.00/pretrain_log.csv").exists());
    let rows = fs::read_to_string(run.join("reports.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(run.join(CONFIG_FILE).exists() && run.join(INPUTS_FILE).exists());

    // Adaptation starts from the same backbone as the source-only baseline.
    let cell = run.join("seed0/frac1.00");
    let a = Checkpoint::load(&cell.join("adapt.ckpt")).unwrap();
    let s = Checkpoint::load(&cell.join("source-only.ckpt")).unwrap();
    assert_eq!(a.parent_hash, s.parent_hash);
    assert_eq!(a.params.backbone_hash(), s.params.backbone_hash());
}

#[test]
fn shipped_configs_load() {
    let desk = RunConfig::load(Some(&repo_config("desk.cfg")), &[]).unwrap();
    assert_eq!(desk.protocol.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(desk.pretrain.epochs, 30);
    assert_eq!(desk.adapt.optimizer.lr, 0.02);
    assert_eq!(desk.pretrain.optimizer.lr, 0.002);
    assert_eq!(desk.datasets.len(), 4);
    let ablation = RunConfig::load(Some(&repo_config("ablation.cfg")), &["seed=3".into()]).unwrap();
    assert_eq!(ablation.seed, 3);
    assert_eq!(ablation.model, last_core::model::ModelConfig::desk_reduced());
}
