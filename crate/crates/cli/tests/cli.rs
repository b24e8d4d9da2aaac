use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sscrs_core::io::{self, check_params_match, read_checkpoint, LabelRemap, RunConfig};
use sscrs_core::metrics::{evaluate, ConfusionMatrix, MetricsReport};
use sscrs_core::network::init_model;
use sscrs_core::train::{CHECKPOINT_FILE, LOG_FILE, LOG_HEADER};
use tempfile::TempDir;

fn sscrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscrs"))
        .args(args)
        .output()
        .expect("run sscrs")
}

fn ok(args: &[&str]) -> String {
    let out = sscrs(args);
    assert!(
        out.status.success(),
        "sscrs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let data = dir.join(format!("data{seed}"));
    ok(&["synth", "--out", s(&data), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    data
}

const TRAIN_CONFIG: &str = "\
preset = desk
train.epochs = 2
train.batch_size = 2
train.seed = 5
";

/// Dataset of two scenes and a run trained on it.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = synth(dir, 2, 3);
    let cfg = dir.join("train.cfg");
    fs::write(&cfg, TRAIN_CONFIG).unwrap();
    let run = dir.join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    (data, run)
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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

#[test]
fn synth_is_deterministic_and_lists_every_scene() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = synth(a.path(), 3, 9);
    let db = synth(b.path(), 3, 9);
    assert_eq!(tree_bytes(&da), tree_bytes(&db));
    let manifest = io::read_manifest(&da).unwrap();
    assert_eq!(manifest.scenes.len(), 3);
    for id in &manifest.scenes {
        let p = io::scene_paths(&da, id);
        assert!(p.points.exists() && p.occupancy.exists() && p.labels.exists());
    }
}

#[test]
fn synthetic_labels_reload_and_score_perfectly_against_themselves() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), 2, 1);
    let (_, samples) = io::read_dataset(&data, &LabelRemap::default()).unwrap();
    for sample in &samples {
        let m = evaluate(&sample.gt, &sample.gt, 19).unwrap();
        assert_eq!(m.iou, 1.0);
        assert_eq!(m.miou_present, 1.0);
        assert!(m.class_present.iter().any(|&p| p));
    }
}

#[test]
fn training_is_reproducible_and_logs_weighted_totals() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (_, ra) = trained(a.path());
    let (_, rb) = trained(b.path());
    let ca = fs::read(ra.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, fs::read(rb.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(
        fs::read(ra.join(LOG_FILE)).unwrap(),
        fs::read(rb.join(LOG_FILE)).unwrap()
    );

    let log = fs::read_to_string(ra.join(LOG_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.len(), LOG_HEADER.split_whitespace().count());
        let (total, bev, sem, com) = (r[2], r[3], r[4], r[5]);
        assert!((total - (3.0 * bev + sem + com)).abs() <= 1e-12 * total.abs().max(1.0));
        assert!((sem - (r[6] + r[7] + r[8])).abs() <= 1e-5 * sem.max(1.0));
        assert!((com - (r[9] + r[10] + r[11])).abs() <= 1e-5 * com.max(1.0));
    }
    assert!(read_checkpoint(ra.join(CHECKPOINT_FILE)).unwrap().adam.is_some());
}

#[test]
fn resume_continues_the_epoch_count() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let ckpt = run.join(CHECKPOINT_FILE);
    let cfg = dir.path().join("train.cfg");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--resume", s(&ckpt)]);
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
}

#[test]
fn eval_report_matches_offline_scoring_of_infer_output() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let ckpt = run.join(CHECKPOINT_FILE);
    let report_path = dir.path().join("report.txt");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report_path)]);
    let report = MetricsReport::parse(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["iou", "miou", "miou_present", "precision", "recall"] {
        let v = report.get(key).unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    for c in 1..=19 {
        assert!(report.get(&format!("class.{c:02}.iou")).is_some());
    }
    assert_eq!(report.get("scenes"), Some(2.0));
    assert!(report.get("params.total").unwrap() > 0.0);

    let remap = LabelRemap::default();
    let (manifest, samples) = io::read_dataset(&data, &remap).unwrap();
    let mut cm = ConfusionMatrix::new(20);
    for (id, sample) in manifest.scenes.iter().zip(&samples) {
        let pred_path = dir.path().join(format!("{id}.label"));
        let csv_path = dir.path().join(format!("{id}.csv"));
        let points = io::scene_paths(&data, id).points;
        ok(&[
            "infer", "--ckpt", s(&ckpt), "--points", s(&points), "--out", s(&pred_path), "--export-csv",
            s(&csv_path),
        ]);
        let pred = io::read_voxel_labels(&pred_path, manifest.grid.dims, &remap).unwrap();
        cm.accumulate(&pred, &sample.gt).unwrap();

        let csv = fs::read_to_string(&csv_path).unwrap();
        let mut rows = csv.lines();
        assert_eq!(rows.next(), Some("x,y,z,class"));
        let occupied = pred.labels().iter().filter(|&&l| l > 0).count();
        assert_eq!(rows.count(), occupied);
    }
    let mut offline = MetricsReport::new();
    offline.add_metrics(&cm.metrics());
    for (k, v) in &offline.values {
        assert_eq!(report.get(k), Some(*v), "{k}");
    }
}

#[test]
fn infer_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let ckpt = run.join(CHECKPOINT_FILE);
    let id = &io::read_manifest(&data).unwrap().scenes[0];
    let points = io::scene_paths(&data, id).points;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("pred{i}.label"));
        let csv = dir.path().join(format!("pred{i}.csv"));
        ok(&["infer", "--ckpt", s(&ckpt), "--points", s(&points), "--out", s(&out), "--export-csv", s(&csv)]);
        outputs.push((fs::read(&out).unwrap(), fs::read(&csv).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].0.len(), 2 * 64 * 64 * 8);
}

#[test]
fn eval_with_mismatched_model_names_the_tensor() {
    let dir = TempDir::new().unwrap();
    let (data, run) = trained(dir.path());
    let ckpt = run.join(CHECKPOINT_FILE);
    let other = dir.path().join("other.cfg");
    fs::write(&other, "preset = desk\nmodel.voxel_width = 8\n").unwrap();
    let report = dir.path().join("report.txt");
    let out = sscrs(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report), "--config", s(&other)]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = RunConfig::load(&other).unwrap();
    let expected = check_params_match(
        &init_model::<f32>(&cfg.model, 0).unwrap(),
        &read_checkpoint(&ckpt).unwrap().params,
    )
    .unwrap_err()
    .to_string();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&expected), "{stderr}");
    assert!(!report.exists());
}

#[test]
fn gradcheck_lists_each_case_once_and_catches_a_broken_rule() {
    let stdout = ok(&["gradcheck", "--scale", "tiny"]);
    let names: Vec<&str> = stdout
        .lines()
        .skip(1)
        .filter(|l| l.ends_with("PASS") || l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    for op in sscrs_core::gradcheck::suite::PRIMITIVE_OPS {
        assert_eq!(names.iter().filter(|n| *n == op).count(), 1, "{op}");
    }
    assert!(!stdout.contains("FAIL"));

    let broken = sscrs(&["gradcheck", "--scale", "tiny", "--inject-fault"]);
    assert_eq!(broken.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&broken.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("sigmoid ") && l.ends_with("FAIL")));
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    assert_eq!(sscrs(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sscrs(&["train", "--config"]).status.code(), Some(1));
    assert_eq!(sscrs(&["--help"]).status.code(), Some(0));

    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = sscrs(&["train", "--config", s(&missing), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.epochz = 3\n").unwrap();
    let out = sscrs(&["train", "--config", s(&bad), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochz"));

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, [1u8; 10]).unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"nonsense").unwrap();
    let out = sscrs(&["infer", "--ckpt", s(&ckpt), "--points", s(&junk), "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
}
