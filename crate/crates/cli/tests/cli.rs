use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn drq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// Synthetic data, a trained model and its code file.
    fn pipeline(&self, k: &str, m: &str) {
        ok(&["synth", "--n", "600", "--d", "8", "--clusters", "4", "--seed", "2", "--out", &self.s("x.fvecs")]);
        ok(&[
            "train", "--input", &self.s("x.fvecs"), "--k", k, "--m", m, "--seed", "5",
            "--epochs-stage2", "2", "--epochs-stage3", "2", "--out", &self.s("m.drqm"),
            "--log", &self.s("train.log"),
        ]);
        ok(&["encode", "--model", &self.s("m.drqm"), "--input", &self.s("x.fvecs"), "--out", &self.s("c.drqc")]);
    }
}

fn log_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_f32_records(path: &Path, d: usize) -> Vec<Vec<f32>> {
    let bytes = fs::read(path).unwrap();
    bytes
        .chunks(4 + 4 * d)
        .map(|r| r[4..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        .collect()
}

fn write_fvecs(path: &Path, rows: &[Vec<f32>]) {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&(r.len() as i32).to_le_bytes());
        for v in r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).unwrap();
}

fn write_labels(path: &Path, labels: &[i32]) {
    let mut out = Vec::new();
    for l in labels {
        out.extend_from_slice(&1i32.to_le_bytes());
        out.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, out).unwrap();
}

#[test]
fn train_logs_seed_and_config_and_writes_32_bit_codes() {
    let w = Workspace::new();
    w.pipeline("256", "4");
    let log = log_lines(&w.path("train.log"));
    assert_eq!(log[0]["event"], "start");
    assert_eq!(log[0]["seed"], 5);
    assert_eq!(log[0]["config"]["k"], 256);
    assert!(log.iter().any(|e| e["event"] == "epoch"));
    let done = log.last().unwrap();
    assert_eq!(done["code_bits"], 32);
    // header + 600 x (4 code bytes + 4 norm bytes) + checksum
    assert_eq!(fs::metadata(w.path("c.drqc")).unwrap().len(), 22 + 600 * 8 + 4);
}

#[test]
fn k2048_reports_44_bits() {
    let w = Workspace::new();
    ok(&["synth", "--n", "2100", "--d", "4", "--clusters", "3", "--out", &w.s("x.fvecs")]);
    ok(&[
        "train", "--input", &w.s("x.fvecs"), "--k", "2048", "--m", "4", "--epochs-stage2", "0",
        "--epochs-stage3", "0", "--kmeans-iters", "2", "--out", &w.s("m.drqm"), "--log", &w.s("t.log"),
    ]);
    assert_eq!(log_lines(&w.path("t.log")).last().unwrap()["code_bits"], 44);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let w = Workspace::new();
    w.pipeline("16", "2");
    ok(&[
        "--threads", "1", "train", "--input", &w.s("x.fvecs"), "--k", "16", "--m", "2", "--seed", "5",
        "--epochs-stage2", "2", "--epochs-stage3", "2", "--out", &w.s("again.drqm"),
    ]);
    ok(&[
        "train", "--input", &w.s("x.fvecs"), "--k", "16", "--m", "2", "--seed", "5",
        "--epochs-stage2", "2", "--epochs-stage3", "2", "--out", &w.s("again2.drqm"),
    ]);
    assert_eq!(fs::read(w.path("again.drqm")).unwrap(), fs::read(w.path("again2.drqm")).unwrap());
}

#[test]
fn reconstruction_matches_reported_distortion() {
    let w = Workspace::new();
    w.pipeline("16", "3");
    ok(&[
        "encode", "--model", &w.s("m.drqm"), "--input", &w.s("x.fvecs"), "--out", &w.s("c2.drqc"),
        "--reconstruct", &w.s("r.fvecs"), "--log", &w.s("enc.log"),
    ]);
    let reported = log_lines(&w.path("enc.log")).last().unwrap()["mean_e_hard_per_level"][2]
        .as_f64()
        .unwrap();
    let x = read_f32_records(&w.path("x.fvecs"), 8);
    let r = read_f32_records(&w.path("r.fvecs"), 8);
    let mean: f64 = x
        .iter()
        .zip(&r)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / x.len() as f64;
    assert!((mean - reported).abs() < 1e-5, "{mean} vs {reported}");
}

#[test]
fn empty_input_gives_empty_code_file() {
    let w = Workspace::new();
    w.pipeline("16", "2");
    fs::write(w.path("empty.fvecs"), b"").unwrap();
    ok(&["encode", "--model", &w.s("m.drqm"), "--input", &w.s("empty.fvecs"), "--out", &w.s("e.drqc")]);
    assert_eq!(fs::metadata(w.path("e.drqc")).unwrap().len(), 22 + 4);
    let out = ok(&[
        "search", "--model", &w.s("m.drqm"), "--codes", &w.s("e.drqc"), "--queries", &w.s("x.fvecs"),
        "--topk", "3",
    ]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn search_with_large_topk_and_prefix() {
    let w = Workspace::new();
    w.pipeline("16", "4");
    let out = ok(&[
        "search", "--model", &w.s("m.drqm"), "--codes", &w.s("c.drqc"), "--queries", &w.s("x.fvecs"),
        "--topk", "100000", "--prefix-m", "2", "--out", &w.s("hits.tsv"),
    ]);
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(w.path("hits.tsv")).unwrap();
    let first_query = text.lines().filter(|l| l.starts_with("0\t")).count();
    assert_eq!(first_query, 600);
    let bad = drq(&[
        "search", "--model", &w.s("m.drqm"), "--codes", &w.s("c.drqc"), "--queries", &w.s("x.fvecs"),
        "--topk", "5", "--prefix-m", "5",
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn eval_reproduces_hand_computed_average_precision() {
    let w = Workspace::new();
    // single-level model with codewords on the axes
    let mut model = Vec::new();
    model.extend_from_slice(b"DRQM");
    model.extend_from_slice(&1u16.to_le_bytes());
    for v in [4u32, 2, 1] {
        model.extend_from_slice(&v.to_le_bytes());
    }
    model.extend_from_slice(&0.5f64.to_le_bytes());
    model.extend_from_slice(&10.0f64.to_le_bytes());
    for v in [1.0f32, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0] {
        model.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&model);
    model.extend_from_slice(&crc.to_le_bytes());
    fs::write(w.path("m.drqm"), model).unwrap();

    write_fvecs(&w.path("db.fvecs"), &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
    write_labels(&w.path("db.labels"), &[0, 1, 0]);
    write_fvecs(&w.path("q.fvecs"), &[vec![1.0, 0.1]]);
    write_labels(&w.path("q.labels"), &[0]);
    ok(&["encode", "--model", &w.s("m.drqm"), "--input", &w.s("db.fvecs"), "--out", &w.s("c.drqc")]);
    let out = ok(&[
        "eval", "--model", &w.s("m.drqm"), "--codes", &w.s("c.drqc"), "--queries", &w.s("q.fvecs"),
        "--db-labels", &w.s("db.labels"), "--query-labels", &w.s("q.labels"), "--map-cutoff", "3",
        "--precision-at", "1,3", "--pr-curve", &w.s("pr.tsv"),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("map@3\t0.833333"), "{text}");
    assert!(text.contains("precision@1\t1.000000"));
    assert!(text.contains("precision@3\t0.666667"));
    assert!(fs::read_to_string(w.path("pr.tsv")).unwrap().lines().count() > 1);
}

/// Reference CRC-32 (IEEE), bit by bit.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn failures_map_to_exit_codes() {
    let w = Workspace::new();
    w.pipeline("16", "2");
    let x = w.s("x.fvecs");

    let missing_labels = drq(&[
        "eval", "--model", &w.s("m.drqm"), "--codes", &w.s("c.drqc"), "--queries", &x,
    ]);
    assert_eq!(code(&missing_labels), 2);
    assert_eq!(String::from_utf8_lossy(&missing_labels.stderr).lines().count(), 1);

    let refine_without_labels = drq(&[
        "train", "--input", &x, "--k", "16", "--m", "2", "--loss-flags", "hard,triplet", "--out", &w.s("z"),
    ]);
    assert_eq!(code(&refine_without_labels), 2);

    let not_power_of_two = drq(&["train", "--input", &x, "--k", "12", "--m", "2", "--out", &w.s("z")]);
    assert_eq!(code(&not_power_of_two), 2);

    let bad_flag = drq(&["train", "--input", &x, "--k", "16", "--m", "2", "--loss-flags", "nope", "--out", &w.s("z")]);
    assert_eq!(code(&bad_flag), 2);

    assert_eq!(code(&drq(&["train", "--k", "16"])), 2);

    write_fvecs(&w.path("wide.fvecs"), &[vec![0.0; 9]]);
    let dim_mismatch = drq(&["encode", "--model", &w.s("m.drqm"), "--input", &w.s("wide.fvecs"), "--out", &w.s("z")]);
    assert_eq!(code(&dim_mismatch), 2);

    let mut model = fs::read(w.path("m.drqm")).unwrap();
    model[40] ^= 1;
    fs::write(w.path("bad.drqm"), model).unwrap();
    let corrupt = drq(&["encode", "--model", &w.s("bad.drqm"), "--input", &x, "--out", &w.s("z")]);
    assert_eq!(code(&corrupt), 1);
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("CRC"));

    let mut codes = fs::read(w.path("c.drqc")).unwrap();
    codes[30] ^= 0x80;
    fs::write(w.path("bad.drqc"), codes).unwrap();
    let corrupt_codes = drq(&["search", "--model", &w.s("m.drqm"), "--codes", &w.s("bad.drqc"), "--queries", &x, "--topk", "1"]);
    assert_eq!(code(&corrupt_codes), 1);

    let missing = drq(&["encode", "--model", &w.s("nope.drqm"), "--input", &x, "--out", &w.s("z")]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn refinement_pipeline_with_head() {
    let w = Workspace::new();
    ok(&["synth", "--n", "300", "--d", "6", "--clusters", "3", "--seed", "4", "--out", &w.s("x.fvecs")]);
    write_fvecs(&w.path("emb.fvecs"), &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.7, -0.7]]);
    ok(&[
        "train", "--input", &w.s("x.fvecs"), "--labels", &w.s("x.fvecs.labels"), "--embeddings", &w.s("emb.fvecs"),
        "--k", "8", "--m", "2", "--loss-flags", "hard,soft,joint,triplet,margin", "--epochs-stage1", "2",
        "--epochs-stage2", "1", "--epochs-stage3", "1", "--out", &w.s("m.drqm"),
    ]);
    assert!(w.path("m.drqm.head").exists());
    ok(&[
        "encode", "--model", &w.s("m.drqm"), "--head", &w.s("m.drqm.head"), "--input", &w.s("x.fvecs"),
        "--out", &w.s("c.drqc"),
    ]);
    let out = ok(&[
        "eval", "--model", &w.s("m.drqm"), "--head", &w.s("m.drqm.head"), "--codes", &w.s("c.drqc"),
        "--queries", &w.s("x.fvecs"), "--db-labels", &w.s("x.fvecs.labels"),
        "--query-labels", &w.s("x.fvecs.labels"), "--map-cutoff", "50",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("map@50\t"));
}
