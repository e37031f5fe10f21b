use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rp2pn::checkpoint::Checkpoint;
use rp2pn::data::{read_png, scene_dir};

const TINY: &[&str] = &[
    "synth.train=2",
    "synth.val=0",
    "synth.test=2",
    "synth.scene.height=16",
    "synth.scene.width=16",
    "model.base_width=2",
    "model.lstm_hidden=4",
    "schedule.max_steps=2",
    "schedule.checkpoint_every=1",
];

fn rp2pn(dir: &Path, args: &[&str], overrides: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rp2pn"));
    cmd.current_dir(dir).env_remove("RP2PN_OUTPUT_ROOT").args(args);
    for o in TINY.iter().chain(overrides) {
        cmd.arg("--set").arg(o);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(rp2pn(tmp.path(), &["synth"], &[&format!("data.root={name}")]));
    }
    let data = |name: &str| -> Vec<(PathBuf, Vec<u8>)> {
        files(&tmp.path().join(name))
            .into_iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "png" || e == "txt"))
            .collect()
    };
    let (a, b) = (data("a"), data("b"));
    assert_eq!(a, b);
    let root = tmp.path().join("a");
    let scenes: Vec<_> = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(scenes.len(), 4 * 12);
    assert_eq!(pngs(&scene_dir(&root, "train_0000")).len(), 12);
    assert_eq!(fs::read_to_string(root.join("train.txt")).unwrap(), "train_0000\ntrain_0001\n");
    assert!(root.join("resolved_config.toml").is_file());
    assert!(fs::read_to_string(root.join("VERSION")).unwrap().starts_with("rp2pn-v"));
}

#[test]
fn synth_zero_scenes_writes_empty_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rp2pn(tmp.path(), &["synth"], &["synth.train=0", "synth.test=0", "data.root=d"]));
    for split in ["train", "val", "test"] {
        assert_eq!(fs::read_to_string(tmp.path().join(format!("d/{split}.txt"))).unwrap(), "");
    }
}

#[test]
fn train_infer_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let common = ["data.root=d", "output_dir=run"];
    ok(rp2pn(dir, &["synth"], &common));
    ok(rp2pn(dir, &["train"], &common));
    let run = dir.join("run");
    assert!(run.join("resolved_config.toml").is_file());
    assert!(run.join("VERSION").is_file());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    let last = run.join("checkpoints/last.ckpt");
    assert_eq!(Checkpoint::<f32>::load(&last).unwrap().step, 2);

    let resumed = ok(rp2pn(dir, &["train", "--resume", last.to_str().unwrap()], &["data.root=d", "output_dir=run", "schedule.max_steps=4"]));
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("resuming from step 2"));
    assert_eq!(Checkpoint::<f32>::load(&last).unwrap().step, 4);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4"]);

    let scene = scene_dir(&dir.join("d"), "test_0000");
    let args = ["infer", "--checkpoint", last.to_str().unwrap(), "--scene", scene.to_str().unwrap(), "--out", "inf"];
    ok(rp2pn(dir, &args, &common));
    let images = pngs(&dir.join("inf"));
    assert_eq!(images.len(), 14, "{images:?}");
    for role in ['R', 'T'] {
        let dop = read_png(&dir.join(format!("inf/{role}_dop.png")), true).unwrap();
        assert!(dop.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let first = files(&dir.join("inf"));
    ok(rp2pn(dir, &args, &common));
    assert_eq!(first, files(&dir.join("inf")));

    ok(rp2pn(dir, &["eval", "--checkpoint", last.to_str().unwrap()], &common));
    let csv = fs::read_to_string(run.join("eval_test/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn oracle_eval_scores_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let common = ["data.root=d", "output_dir=run", "synth.scene.t_level=[0.05, 0.3]", "synth.scene.r_level=[0.0, 0.3]"];
    ok(rp2pn(tmp.path(), &["synth"], &common));
    ok(rp2pn(tmp.path(), &["eval", "--oracle", "--split", "test"], &common));
    let csv = fs::read_to_string(tmp.path().join("run/eval_test/eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let f: Vec<f64> = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!([f[0], f[2]], [100.0, 100.0], "{row}");
        assert!(f[1] > 1.0 - 1e-9 && f[3] > 1.0 - 1e-9, "{row}");
    }
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rp2pn(tmp.path(), &["synth"], &["data.root=d"]));
    let out = rp2pn(tmp.path(), &["eval", "--checkpoint", "nope.ckpt"], &["data.root=d"]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error [io]") && err.contains("nope.ckpt"), "{err}");
}

#[test]
fn bad_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rp2pn(tmp.path(), &["synth"], &["model.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(rp2pn(dir, &["synth"], &["data.root=d"]));
    ok(rp2pn(dir, &["train"], &["data.root=d", "output_dir=run"]));
    let path = dir.join("run/checkpoints/last.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    bytes[8] = 99;
    fs::write(&path, bytes).unwrap();
    let out = rp2pn(dir, &["eval", "--checkpoint", path.to_str().unwrap()], &["data.root=d"]);
    assert_eq!(out.status.code(), Some(6), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_root_env_relocates_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(rp2pn(dir, &["synth"], &["data.root=d"]));
    let out = Command::new(env!("CARGO_BIN_EXE_rp2pn"))
        .current_dir(dir)
        .env("RP2PN_OUTPUT_ROOT", dir.join("elsewhere"))
        .args(["eval", "--oracle", "--set", "data.root=d", "--set", "output_dir=run"])
        .args(TINY.iter().flat_map(|o| ["--set", o]))
        .output()
        .unwrap();
    ok(out);
    assert!(dir.join("elsewhere/run/eval_test/eval.csv").is_file());
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let common = ["data.root=d", "output_dir=run", "schedule.max_steps=1"];
    ok(rp2pn(tmp.path(), &["synth"], &common));
    ok(rp2pn(tmp.path(), &["ablate", "--split", "test"], &common));
    let csv = fs::read_to_string(tmp.path().join("run/ablation/ablation.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["1", "2", "3", "4", "ours"], "{csv}");
    assert!(tmp.path().join("run/ablation/model_ours/checkpoints/last.ckpt").is_file());
}
