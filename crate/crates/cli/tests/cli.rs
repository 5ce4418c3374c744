use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lpgflow::checkpoint::Checkpoint;
use lpgflow::config::RunConfig;
use lpgflow_core::image_io;
use lpgflow_core::model::Dit;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lpgflow"));
    c.env_remove("LPGFLOW_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn datagen(dir: &Path, task: &str, count: usize) -> PathBuf {
    let o = run(&["datagen", "--task", task, "--count", &count.to_string(), "--seed", "7", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.jsonl")
}

fn write_config(dir: &Path, manifest: &Path, out: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{"hidden_dim": 16, "num_layers": 2, "num_heads": 2, "lora_rank": 2, "num_prompt_tokens": 4}},
  "optimizer": {{"batch_size": 2, "train_steps": 3, "lr": 0.01}},
  "seed": 11,
  "paths": {{"manifest": "{}", "out_dir": "{}"}}{extra}
}}"#,
        p(manifest),
        p(out)
    );
    let path = dir.join(format!("cfg_{}.json", out.file_name().unwrap().to_str().unwrap()));
    fs::write(&path, cfg).unwrap();
    path
}

fn train(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", p(cfg)];
    args.extend_from_slice(extra);
    run(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn datagen_repeats_bytes_and_validates_arguments() {
    let t = tempfile::tempdir().unwrap();
    let m = datagen(&t.path().join("a"), "colorize", 10);
    datagen(&t.path().join("b"), "colorize", 10);
    assert_eq!(fs::read_to_string(&m).unwrap().lines().count(), 10);
    assert_eq!(files(&t.path().join("a")), files(&t.path().join("b")));

    let out = t.path().join("c");
    assert_eq!(code(&run(&["datagen", "--task", "colorize", "--count", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&run(&["datagen", "--task", "paint", "--count", "3", "--out", p(&out)])), 2);
    assert_eq!(code(&run(&["datagen", "--count", "3"])), 2);
}

#[test]
fn seed_precedence_is_flag_then_environment() {
    let t = tempfile::tempdir().unwrap();
    let dir = |n: &str| t.path().join(n);
    let gen = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["datagen", "--task", "deblur", "--count", "2", "--out", p(out)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        if let Some(e) = env {
            c.env("LPGFLOW_SEED", e);
        }
        assert!(c.status().unwrap().success());
        files(out)
    };
    let flag7 = gen(&dir("f7"), None, Some("7"));
    assert_eq!(gen(&dir("e7"), Some("7"), None), flag7);
    assert_eq!(gen(&dir("e9f7"), Some("9"), Some("7")), flag7);
    assert_ne!(gen(&dir("e9"), Some("9"), None), flag7);
    let mut c = bin();
    c.args(["datagen", "--task", "deblur", "--count", "2", "--out", p(&dir("bad"))]).env("LPGFLOW_SEED", "x");
    assert_eq!(c.status().unwrap().code(), Some(2));
}

#[test]
fn training_is_deterministic_and_keeps_the_base_frozen() {
    let t = tempfile::tempdir().unwrap();
    let m = datagen(&t.path().join("data"), "colorize", 3);
    let a = t.path().join("run");
    let cfg = write_config(t.path(), &m, &a, "");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let o = train(&cfg, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(files(&a));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("step,loss"));

    let ck = Checkpoint::load(&a.join("checkpoint.lpgf")).unwrap();
    let fresh = Dit::new(ck.config.model.clone(), ck.config.seed).unwrap();
    for (name, t0) in fresh.base.iter() {
        let t1 = &ck.tensors[name];
        assert!(t0.data().iter().zip(t1.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    let standalone = Checkpoint::load(&a.join("adapter.lpgf")).unwrap();
    assert_eq!(standalone.adapter().unwrap(), ck.adapter().unwrap());
    assert!(standalone.model().is_err());

    let bytes = fs::read(a.join("checkpoint.lpgf")).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
}

#[test]
fn training_failures_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let m = datagen(&t.path().join("data"), "colorize", 1);
    let cfg = write_config(t.path(), &m, &t.path().join("nan"), r#", "tuning_mode": "full""#);
    let o = train(&cfg, &["--set", "optimizer.lr=1e30", "--set", "optimizer.train_steps=40"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at step"));

    assert_eq!(code(&train(&cfg, &["--set", "optimizer.momentum=1"])), 2);
    assert_eq!(code(&train(&cfg, &["--set", "optimizer.lr=-1"])), 2);
    assert_eq!(code(&run(&["train", "--config", p(&t.path().join("none.json"))])), 1);

    let empty = t.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let cfg = write_config(t.path(), &empty, &t.path().join("empty"), "");
    assert_eq!(code(&train(&cfg, &[])), 5);
    fs::write(&empty, "{not json}\n").unwrap();
    assert_eq!(code(&train(&cfg, &[])), 6);
}

/// Trains a run and returns its directory.
fn trained(root: &Path, name: &str, manifest: &Path, extra: &str, args: &[&str]) -> PathBuf {
    let out = root.join(name);
    let cfg = write_config(root, manifest, &out, extra);
    let o = train(&cfg, args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn sampling_contract() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let m = datagen(&root.join("data"), "colorize", 2);
    let base = trained(root, "base", &m, r#", "tuning_mode": "full""#, &[]);
    let base_ck = base.join("checkpoint.lpgf");
    let lora = |name: &str, seed: &str| {
        trained(root, name, &m, "", &["--set", &format!("paths.base_checkpoint={}", p(&base_ck)), "--seed", seed])
    };
    let (l1, l2) = (lora("l1", "1"), lora("l2", "2"));
    let left = root.join("data/00000_left.png");

    let sample = |out: &Path, extra: &[&str]| {
        let mut args = vec!["sample", "--checkpoint", p(&base_ck), "--left", p(&left), "--out", p(out), "--steps", "6", "--seed", "3"];
        args.extend_from_slice(extra);
        run(&args)
    };
    let a1 = l1.join("adapter.lpgf");
    let a2 = l2.join("adapter.lpgf");
    let o = sample(&root.join("s1.png"), &["--adapter", p(&a1)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&sample(&root.join("s2.png"), &["--adapter", p(&a1)])), 0);
    assert_eq!(fs::read(root.join("s1.png")).unwrap(), fs::read(root.join("s2.png")).unwrap());
    let img = image_io::read_canvas(&root.join("s1.png")).unwrap();
    let src = image_io::read_canvas(&left).unwrap();
    assert_eq!((img.height(), img.width()), (src.height(), src.width()));

    let o = sample(&root.join("merged.png"), &["--adapter", p(&a1), "--adapter", p(&a2), "--dump-attn", p(&root.join("attn"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 6 steps at interval 10 record step 0 only, for each of 2 layers.
    assert_eq!(fs::read_dir(root.join("attn")).unwrap().count(), 2);
    assert_ne!(fs::read(root.join("merged.png")).unwrap(), fs::read(root.join("s1.png")).unwrap());

    let wide = trained(root, "wide", &m, "", &["--set", "model.hidden_dim=32"]);
    let o = sample(&root.join("bad.png"), &["--adapter", p(&wide.join("adapter.lpgf"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&sample(&root.join("bad.png"), &["--adapter", p(&root.join("missing.lpgf"))])), 1);
}

#[test]
fn damaged_checkpoints_exit_with_six() {
    let t = tempfile::tempdir().unwrap();
    let m = datagen(&t.path().join("data"), "colorize", 1);
    let run_dir = trained(t.path(), "r", &m, "", &[]);
    let good = fs::read(run_dir.join("checkpoint.lpgf")).unwrap();
    let o = run(&["inspect-ckpt", p(&run_dir.join("checkpoint.lpgf"))]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kind"], "base");
    assert_eq!(v["step"], 3);

    let bad = t.path().join("bad.lpgf");
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    fs::write(&bad, &magic).unwrap();
    assert_eq!(code(&run(&["inspect-ckpt", p(&bad)])), 6);
    let mut version = good.clone();
    version[4] = 2;
    fs::write(&bad, &version).unwrap();
    assert_eq!(code(&run(&["inspect-ckpt", p(&bad)])), 6);
    fs::write(&bad, &good[..good.len() - 5]).unwrap();
    assert_eq!(code(&run(&["inspect-ckpt", p(&bad)])), 6);
    let left = t.path().join("data/00000_left.png");
    let o = run(&["sample", "--checkpoint", p(&bad), "--left", p(&left), "--out", p(&t.path().join("o.png"))]);
    assert_eq!(code(&o), 6);
}

#[test]
fn eval_reports_and_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    datagen(&t.path().join("data"), "canny2img", 3);
    let (pred, gt) = (t.path().join("pred"), t.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    for i in 0..3 {
        let src = t.path().join(format!("data/{i:05}_right.png"));
        fs::copy(&src, gt.join(format!("{i}.png"))).unwrap();
        if i < 2 {
            fs::copy(&src, pred.join(format!("{i}.png"))).unwrap();
        }
    }
    fs::copy(t.path().join("data/00000_left.png"), pred.join("extra.png")).unwrap();
    let report = t.path().join("report.json");
    let o = run(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--metrics", "psnr,ssim", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["count"], 2);
    assert_eq!(v["aggregate"]["psnr"]["count"], 2);
    assert_eq!(v["aggregate"]["psnr"]["mean"], 99.0);
    assert_eq!(v["aggregate"]["ssim"]["mean"], 1.0);
    assert_eq!(v["skipped"], serde_json::json!(["2.png", "extra.png"]));
    assert!(v["aggregate"].get("edge_alignment").is_none());

    let empty = t.path().join("none");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["eval", "--pred", p(&empty), "--gt", p(&gt)])), 5);
    assert_eq!(code(&run(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--metrics", "fid"])), 2);
}

#[test]
fn config_digest_ignores_formatting() {
    let a = RunConfig::from_json(r#"{"seed": 4, "optimizer": {"lr": 0.001}}"#, &[]).unwrap();
    let b = RunConfig::from_json("{\n  \"optimizer\": {\"lr\": 1e-3},\n  \"seed\": 4\n}", &[]).unwrap();
    assert_eq!(a.digest(), b.digest());
}
