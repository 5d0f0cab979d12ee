use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use snip_core::model::{LayerId, PrecisionPolicy};
use snip_core::policy::contiguous_groups;
use snip_core::stats::StatsBundle;
use snip_core::train::{fp4_fraction, RunConfig};

fn snip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snip"))
        .args(args)
        .env_remove("SNIP_SEED")
        .output()
        .expect("spawn snip")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config(n_blocks: usize, steps: u64) -> String {
    format!(
        r#"{{
  "schema": "snip.run.v1",
  "model": {{"vocab": 32, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_blocks": {n_blocks}, "seq_len": 8, "seed": 0}},
  "quant_block": 8,
  "e_t": 0.5,
  "refresh_interval": 3,
  "seed": 5,
  "steps": {steps},
  "batch_size": 2
}}"#
    )
}

fn setup(dir: &Path, n_blocks: usize, steps: u64) -> String {
    let cfg = dir.join("run.json");
    fs::write(&cfg, config(n_blocks, steps)).unwrap();
    ok(snip(&["train", "--config", cfg.to_str().unwrap()]));
    dir.join("run").to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_run_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = setup(tmp.path(), 1, 7);
    let run = Path::new(&run);
    for f in ["config.json", "loss.csv", "train_log.json", "policies/final.json", "checkpoint/checkpoint.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,loss,policy,fp4_fraction");
    assert_eq!(loss.lines().count(), 1 + 7);
    assert_eq!(fs::read_dir(run.join("bundles")).unwrap().count(), 3);
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, config(1, 2)).unwrap();
    let run = |out: &str, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_snip"));
        c.args(["train", "--config", s(&cfg), "--out", s(&tmp.path().join(out))]);
        match seed {
            Some(v) => c.env("SNIP_SEED", v),
            None => c.env_remove("SNIP_SEED"),
        };
        ok(c.output().unwrap());
        fs::read_to_string(tmp.path().join(out).join("loss.csv")).unwrap()
    };
    let base = run("a", None);
    assert_eq!(run("b", None), base);
    assert_ne!(run("c", Some("99")), base);
    let used = RunConfig::from_json(&fs::read_to_string(tmp.path().join("c/config.json")).unwrap()).unwrap();
    assert_eq!(used.seed, 99);
}

#[test]
fn snapshot_plan_and_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run = setup(tmp.path(), 3, 4);
    let run = Path::new(&run);
    let ckpt = run.join("checkpoint");
    let bundle = tmp.path().join("bundle.json");
    ok(snip(&["snapshot-stats", "--checkpoint", s(&ckpt), "--out", s(&bundle)]));
    let b = StatsBundle::from_json(&fs::read_to_string(&bundle).unwrap()).unwrap();
    assert_eq!(b.layers.len(), 21);

    // Planning is a pure function of the bundle.
    let p1 = tmp.path().join("p1.json");
    let p2 = tmp.path().join("p2.json");
    let report = tmp.path().join("report.json");
    ok(snip(&["plan", "--bundle", s(&bundle), "--et", "0.6", "--out", s(&p1), "--report", s(&report)]));
    ok(snip(&["plan", "--bundle", s(&bundle), "--et", "0.6", "--out", s(&p2)]));
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert!(report.exists());

    let cfg = RunConfig::from_json(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let load = |p: &Path| PrecisionPolicy::from_json(&fs::read_to_string(p).unwrap(), 3).unwrap();

    let full = tmp.path().join("full.json");
    ok(snip(&["plan", "--bundle", s(&bundle), "--et", "1", "--out", s(&full)]));
    let full = load(&full);
    assert!(full.layers().iter().all(|l| l.fp4_gemm_fraction() == 1.0));

    let grouped = tmp.path().join("grouped.json");
    ok(snip(&["plan", "--bundle", s(&bundle), "--et", "0.75", "--groups", "4", "--out", s(&grouped)]));
    let grouped = load(&grouped);
    let ids = LayerId::all(3);
    let mc = cfg.model_config();
    let total: u64 = ids.iter().map(|&id| snip_core::model::layer_flops(id, &mc, cfg.tokens())).sum();
    let mut start = 0;
    for size in contiguous_groups(21, 4).unwrap() {
        let e: f64 = ids[start..start + size]
            .iter()
            .map(|&id| grouped.get(id).fp4_gemm_fraction() * snip_core::model::layer_flops(id, &mc, cfg.tokens()) as f64 / total as f64)
            .sum();
        assert!(e >= 0.75 / 4.0 - 1e-9, "group starting at {start}: {e}");
        start += size;
    }
    assert!(fp4_fraction(&grouped, &mc, cfg.tokens()) >= 0.75 - 1e-9);

    let csv = tmp.path().join("eval.csv");
    let json = tmp.path().join("eval.json");
    let stdout = ok(snip(&["eval-estimates", "--checkpoint", s(&ckpt), "--out", s(&csv), "--json", s(&json)]));
    assert!(stdout.contains("spearman"));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "block,kind,dL_est,dL_true,dW_est,dW_true");
    assert_eq!(text.lines().count(), 1 + 21);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed["schema"], "snip.eval.v1");
}

#[test]
fn eval_requires_optimizer_state() {
    let tmp = tempfile::tempdir().unwrap();
    let run = setup(tmp.path(), 1, 1);
    let ckpt = Path::new(&run).join("checkpoint");
    for sub in ["adam_m", "adam_v"] {
        fs::remove_dir_all(ckpt.join(sub)).unwrap();
    }
    let meta = ckpt.join("checkpoint.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"optimizer_state\": true", "\"optimizer_state\": false");
    fs::write(&meta, text).unwrap();
    let out = snip(&["eval-estimates", "--checkpoint", s(&ckpt), "--out", s(&tmp.path().join("e.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer state"));
}

#[test]
fn report_is_idempotent_and_flags_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = setup(tmp.path(), 2, 5);
    ok(snip(&["report", "--dir", &run]));
    let files = ["loss_curve.csv", "policy_heatmap.csv", "summary.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(Path::new(&run).join("report").join(f)).unwrap()).collect();
    ok(snip(&["report", "--dir", &run]));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(Path::new(&run).join("report").join(f)).unwrap(), bytes, "{f}");
    }
    let heat = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(heat.lines().count(), 1 + 7 * 2);
    let curve = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(curve.lines().count(), 1 + 5);

    let empty = tempfile::tempdir().unwrap();
    let out = snip(&["report", "--dir", s(empty.path())]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("partial report"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, config(1, 1).replace("\"refresh_interval\": 3", "\"refresh_interval\": 0")).unwrap();
    let out = snip(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refresh_interval"));

    let out = snip(&["plan", "--bundle", s(&tmp.path().join("missing.json")), "--et", "0.5", "--out", "x.json"]);
    assert!(!out.status.success());
}
