use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 3,
  "mscan": { "width_multiplier": 0.125 },
  "train": { "batch_size": 4, "max_iters": 6, "lr_decay_every": 4, "val_every": 0 },
  "synthetic": { "identities": 4, "images_per_identity": 4 }
}"#;

fn mscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscan"))
        .args(args)
        .env_remove("MSCAN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.config(), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    fn synth(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        let o = mscan(&["synth", "--config", s(&self.config()), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }

    fn train(&self, data: &Path, mode: &str, ckpt: &str, extra: &[&str]) -> Output {
        let ckpt = self.path(ckpt);
        let config = self.config();
        let mut args = vec!["train", "--config", s(&config), "--data", s(data), "--mode", mode];
        args.extend_from_slice(&["--out", s(&ckpt)]);
        args.extend_from_slice(extra);
        mscan(&args)
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let ws = Workspace::new();
    let a = ws.synth("a");
    let b = ws.synth("b");
    assert!(a.join("manifest.json").is_file());
    let images = dir_bytes(&a.join("images"));
    assert_eq!(images.len(), 16);
    assert_eq!(images, dir_bytes(&b.join("images")));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn config_and_io_errors_exit_2() {
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    fs::write(&bad, "{ \"seed\": ").unwrap();
    let o = mscan(&["synth", "--config", s(&bad), "--out", s(&ws.path("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.json"), "{}", stderr(&o));

    let unknown = ws.path("unknown.json");
    fs::write(&unknown, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let o = mscan(&["synth", "--config", s(&unknown), "--out", s(&ws.path("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));

    let blocker = ws.path("file");
    fs::write(&blocker, "not a directory").unwrap();
    let o = mscan(&["synth", "--config", s(&ws.config()), "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = mscan(&["train", "--config", s(&ws.config()), "--data", s(&ws.path("missing")), "--out", "x.ckpt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn body_training_writes_checkpoints_and_log() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let o = ws.train(&data, "body", "body.ckpt", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("final validation accuracy:"));
    assert!(ws.path("body.ckpt").is_file());
    assert!(ws.path("body.iter4.ckpt").is_file());
    let log = fs::read_to_string(ws.path("body.loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "iter,lr,loss_cls,loss_total,val_acc");
    assert_eq!(lines.count(), 6);
}

#[test]
fn identical_invocations_give_identical_checkpoints() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let a = ws.train(&data, "parts", "a.ckpt", &[]);
    let b = ws.train(&data, "parts", "b.ckpt", &[]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(fs::read(ws.path("a.ckpt")).unwrap(), fs::read(ws.path("b.ckpt")).unwrap());
    let crc = |o: &Output| stdout(o).lines().find(|l| l.contains("crc32")).unwrap().split("crc32").nth(1).unwrap().to_string();
    assert_eq!(crc(&a), crc(&b));
    let c = ws.train(&data, "parts", "c.ckpt", &["--seed", "4"]);
    assert_eq!(code(&c), 0);
    assert_ne!(fs::read(ws.path("a.ckpt")).unwrap(), fs::read(ws.path("c.ckpt")).unwrap());
    let log = fs::read_to_string(ws.path("a.loss.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss_cls,loss_cen,loss_pos,loss_in,loss_total,val_acc\n"));
}

#[test]
fn two_stage_fusion_and_visualization() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    assert_eq!(code(&ws.train(&data, "body", "body.ckpt", &[])), 0);
    assert_eq!(code(&ws.train(&data, "parts", "parts.ckpt", &[])), 0);
    let body = ws.path("body.ckpt");
    let parts = ws.path("parts.ckpt");
    let o = ws.train(&data, "fusion", "fusion.ckpt", &["--init-body", s(&body), "--init-parts", s(&parts)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = ws.train(&data, "fusion", "f2.ckpt", &["--init-body", s(&body)]);
    assert_eq!(code(&o), 2, "init flags go together");
    let o = ws.train(&data, "fusion", "f3.ckpt", &["--init-body", s(&parts), "--init-parts", s(&body)]);
    assert_eq!(code(&o), 2, "swapped sub-models");

    let viz = ws.path("viz");
    let o = mscan(&["visualize-parts", "--ckpt", s(&ws.path("fusion.ckpt")), "--data", s(&data), "--out", s(&viz)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = dir_bytes(&viz);
    assert_eq!(files.len(), 4, "one overlay per query");
    assert!(files.iter().all(|(n, b)| n.ends_with(".ppm") && b.starts_with(b"P6")));

    let o = mscan(&["visualize-parts", "--ckpt", s(&body), "--data", s(&data), "--out", s(&ws.path("v2"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no localization network"));
}

#[test]
fn eval_reports_and_multi_query_identity() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    assert_eq!(code(&ws.train(&data, "body", "m.ckpt", &[])), 0);
    let ckpt = ws.path("m.ckpt");
    let single = ws.path("single");
    let multi = ws.path("multi");
    let o = mscan(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&single)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mscan(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--multi-query", "--report", s(&multi)]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_bytes(&single), dir_bytes(&multi));

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(single.join("summary.json")).unwrap()).unwrap();
    let mut keys: Vec<_> = summary.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["mAP", "num_gallery", "num_query", "rank1", "rank10", "rank20", "rank5"]);
    assert_eq!(summary["num_query"], 4);
    let cmc = fs::read_to_string(single.join("cmc.csv")).unwrap();
    assert!(cmc.starts_with("rank,cmc\n1,"));
}

#[test]
fn queries_without_positives_exit_4() {
    let ws = Workspace::new();
    let cfg = ws.path("one_cam.json");
    let text = TINY.replace(
        r#""identities": 4, "images_per_identity": 4"#,
        r#""identities": 4, "images_per_identity": 4, "cameras": 1, "cross_camera": false"#,
    );
    fs::write(&cfg, text).unwrap();
    let data = ws.path("data");
    assert_eq!(code(&mscan(&["synth", "--config", s(&cfg), "--out", s(&data)])), 0);
    assert_eq!(code(&ws.train(&data, "body", "m.ckpt", &[])), 0);
    let o = mscan(&["eval", "--ckpt", s(&ws.path("m.ckpt")), "--data", s(&data), "--report", s(&ws.path("r"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("0, 1, 2, 3"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let ws = Workspace::new();
    let data = ws.synth("data");
    let o = ws.train(&data, "body", "m.ckpt", &["--lr", "1e30"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn gradcheck_scoping_and_failure() {
    let o = mscan(&["gradcheck", "--component", "losses"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.contains("max rel error")).all(|l| l.starts_with("losses")));
    assert!(out.contains("component losses: max relative error"));
    assert!(!out.contains("layers"));

    let o = mscan(&["gradcheck", "--component", "losses", "--corrupt", "center"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("losses/center"), "{}", stderr(&o));

    assert_eq!(code(&mscan(&["gradcheck", "--component", "shapes"])), 2);
}

#[test]
fn full_gradcheck_passes() {
    let o = mscan(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    for c in ["layers", "stn", "losses", "model"] {
        assert!(stdout(&o).contains(&format!("component {c}:")));
    }
}

#[test]
fn thread_cap_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_mscan"))
            .args(["gradcheck", "--component", "losses"])
            .env("MSCAN_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("0")), 0);
    assert_eq!(code(&run("many")), 2);
}
