use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use patnet::io::encode_ppm;
use patnet::model::{build_variant, count_flops, count_flops_fused, count_params, Variant};
use patnet::tensor::Tensor4;
use serde_json::Value;

fn patnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patnet")).args(args).output().expect("spawn patnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn summary_reports_t0_params() {
    let o = patnet(&["summary", "--variant", "T0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("params")).expect("params line");
    let m: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((m - 4.3).abs() / 4.3 <= 0.05, "{line}");
    for part in ["stem", "stage1", "stage4", "head"] {
        assert!(text.contains(part), "missing {part}");
    }
}

#[test]
fn summary_json_equals_the_counters() {
    for v in Variant::ALL {
        let o = patnet(&["summary", "--variant", v.name(), "--json"]);
        assert!(o.status.success());
        let j: Value = serde_json::from_slice(&o.stdout).unwrap();
        let spec = build_variant(v.name()).unwrap();
        assert_eq!(j["params"], count_params(&spec));
        assert_eq!(j["flops"], count_flops(&spec, (224, 224)));
        assert_eq!(j["fused_flops"], count_flops_fused(&spec, (224, 224)));
        let layer_macs: u64 = j["layers"].as_array().unwrap().iter().map(|l| l["macs"].as_u64().unwrap()).sum();
        assert_eq!(layer_macs, count_flops(&spec, (224, 224)));
    }
}

#[test]
fn gradcheck_without_flags_passes() {
    let o = patnet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for block in ["pat_ch", "pat_sp", "pat_sf"] {
        assert!(text.lines().any(|l| l.starts_with(block) && l.contains("PASS")), "{block}");
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["frobnicate"][..], &["summary"], &["summary", "--variant", "T0", "--bogus"], &[]] {
        let o = patnet(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}");
    }
    let o = patnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("bench"));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.patw");
    let o = patnet(&["infer", "--weights", path(&missing), "--image", path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));

    let o = patnet(&["summary", "--variant", "XL"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("T0, T1, T2, S, M, L"));

    let o = patnet(&["bench", "--variant", "T0", "--iters", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn init_infer_fuse_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (w, w2, fused, img, labels) = (
        dir.path().join("t0.patw"),
        dir.path().join("t0-again.patw"),
        dir.path().join("t0-fused.patw"),
        dir.path().join("img.ppm"),
        dir.path().join("labels.txt"),
    );
    for out in [&w, &w2] {
        let o = patnet(&["init", "--variant", "T0", "--seed", "3", "--out", path(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&w).unwrap(), fs::read(&w2).unwrap());

    let picture = Tensor4::from_fn(1, 3, 180, 260, |_, c, y, x| ((x * (c + 1) + 2 * y) % 256) as f32 / 255.0);
    fs::write(&img, encode_ppm(&picture)).unwrap();
    let names: String = (0..1000).map(|i| format!("label_{i}\n")).collect();
    fs::write(&labels, names).unwrap();

    let args = ["infer", "--weights", path(&w), "--image", path(&img), "--labels", path(&labels), "--topk", "7"];
    let o = patnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    for (rank, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[0], (rank + 1).to_string());
        assert_eq!(fields[2], format!("label_{}", fields[1]));
        let logit: f32 = fields[4].parse().unwrap();
        assert!(logit.is_finite());
    }
    assert!(stderr(&o).contains("1000 logits"));
    assert_eq!(stdout(&patnet(&args)), text);

    let o = patnet(&["fuse", "--weights", path(&w), "--out", path(&fused), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["rewrites", "tensors_before", "tensors_after", "tensors_removed", "end_to_end_max_abs_deviation"] {
        assert!(j.get(key).is_some(), "missing {key}");
    }
    assert!(j["end_to_end_max_abs_deviation"].as_f64().unwrap() <= 1e-3);
    let kinds: Vec<&str> = j["rewrites"].as_array().unwrap().iter().map(|r| r["kind"].as_str().unwrap()).collect();
    assert!(kinds.iter().all(|k| k.chars().all(|c| c.is_ascii_lowercase() || c == '_')), "{kinds:?}");

    let o = patnet(&["infer", "--weights", path(&fused), "--image", path(&img), "--topk", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);

    // Fusing an already fused store is a runtime error.
    let o = patnet(&["fuse", "--weights", path(&fused), "--out", path(&w2)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_text_and_json() {
    let o = patnet(&["bench", "--variant", "T0", "--input-size", "64", "--iters", "3", "--warmup", "1", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j: Value = serde_json::from_slice(&o.stdout).unwrap();
    let keys = [
        "variant", "batch_size", "warmup_iters", "measured_iters", "images_per_sec", "mean_latency_ms",
        "p50_latency_ms", "p95_latency_ms", "thread_count", "fused",
    ];
    assert_eq!(j.as_object().unwrap().len(), keys.len());
    for key in keys {
        assert!(j.get(key).is_some(), "missing {key}");
    }
    assert_eq!(j["measured_iters"], 3);

    let o = patnet(&["bench", "--variant", "T0", "--input-size", "64", "--iters", "2", "--warmup", "0", "--fused"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("fused") && l.ends_with("true")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("images_per_sec")));
}
