use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_alifuse");

const TINY_CONFIG: &str = r#"{
  "model": {"d_model": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1,
            "patch_size": 4, "volume_side": 8, "max_len": 24, "fusion_hidden": 8},
  "train": {"steps": 4, "batch_size": 4, "eval_every": 2}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&["synth", "--n", &n.to_string(), "--side", "8", "--seed", &seed.to_string(), "--out", s(&out)]);
    out
}

struct Trained {
    _tmp: TempDir,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn trained() -> Trained {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let data = synth(&root, 12, 3);
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = root.join("run");
    ok(&["train", s(&data), "--config", s(&cfg), "--seed", "5", "--out", s(&run)]);
    Trained { _tmp: tmp, root, data, run }
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_reports_class_counts_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = ok(&["synth", "--n", "10", "--side", "8", "--seed", "4", "--out", s(&a)]);
    ok(&["synth", "--n", "10", "--side", "8", "--seed", "4", "--out", s(&b)]);
    assert!(out.contains("wrote 10 records"));
    let total: usize = out
        .lines()
        .filter_map(|l| l.strip_prefix("class ").and_then(|r| r.split(": ").nth(1)))
        .map(|n| n.parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 10);
    assert_eq!(fs::read(a.join("manifest.jsonl")).unwrap(), fs::read(b.join("manifest.jsonl")).unwrap());
    for entry in fs::read_dir(a.join("volumes")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join("volumes").join(&name)).unwrap(), fs::read(b.join("volumes").join(&name)).unwrap());
    }
}

#[test]
fn zero_steps_keeps_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 6, 1);
    let cfg = tmp.path().join("zero.json");
    fs::write(&cfg, TINY_CONFIG.replace("\"steps\": 4", "\"steps\": 0")).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", s(&data), "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), "");
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(run.join("best.ckpt")).unwrap());
}

#[test]
fn missing_config_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 4, 1);
    let out =
        run(&["train", s(&data), "--config", s(&tmp.path().join("nope.json")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_dataset_manifest_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 4, 1);
    fs::write(data.join("manifest.jsonl"), "{not json\n").unwrap();
    let out = run(&["train", s(&data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let t = trained();
    let bytes = fs::read(t.run.join("final.ckpt")).unwrap();
    let cut = t.root.join("cut");
    fs::create_dir_all(&cut).unwrap();
    fs::write(cut.join("final.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    fs::copy(t.run.join("vocab.json"), cut.join("vocab.json")).unwrap();
    let out = run(&["eval", s(&t.data), "--checkpoint", s(&cut.join("final.ckpt"))]);
    assert!(!out.status.success());
}

#[test]
fn eval_is_repeatable() {
    let t = trained();
    let ckpt = t.run.join("final.ckpt");
    let first = ok(&["eval", s(&t.data), "--checkpoint", s(&ckpt)]);
    let report = fs::read(t.run.join("eval.json")).unwrap();
    let second = ok(&["eval", s(&t.data), "--checkpoint", s(&ckpt)]);
    assert_eq!(first, second);
    assert_eq!(report, fs::read(t.run.join("eval.json")).unwrap());
}

#[test]
fn exported_gap_matches_the_embeddings() {
    let t = trained();
    let out = t.root.join("emb");
    ok(&["export", s(&t.data), "--checkpoint", s(&t.run.join("final.ckpt")), "--what", "embeddings", "--out", s(&out)]);
    let rows = jsonl(&out.join("embeddings.jsonl"));
    assert_eq!(rows.len(), 12);
    let vec = |r: &serde_json::Value, k: &str| -> Vec<f64> {
        r[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(move |x| x / n)
    };
    let d = vec(&rows[0], "image").len();
    let mut diff = vec![0.0; d];
    for r in &rows {
        for (k, (a, b)) in unit(vec(r, "image")).zip(unit(vec(r, "text"))).enumerate() {
            diff[k] += (a - b) / rows.len() as f64;
        }
    }
    let gap = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let file: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gap.json")).unwrap()).unwrap();
    assert!((file["modality_gap"].as_f64().unwrap() - gap).abs() < 1e-12);
}

#[test]
fn exported_attention_rows_are_distributions() {
    let t = trained();
    let out = t.root.join("att");
    ok(&["export", s(&t.data), "--checkpoint", s(&t.run.join("final.ckpt")), "--what", "attention", "--out", s(&out)]);
    let rows = jsonl(&out.join("attention.jsonl"));
    assert_eq!(rows.len(), 12);
    for r in rows {
        let g = r["grid_side"].as_u64().unwrap() as usize;
        let image: Vec<f64> = r["image_heat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let text: Vec<f64> = r["text_heat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(image.len(), g * g * g);
        assert!((image.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((text.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(text.len(), r["tokens"].as_array().unwrap().len());
    }
}

#[test]
fn manifest_replay_reproduces_the_run() {
    let t = trained();
    let again = t.root.join("again");
    ok(&["train", "--manifest", s(&t.run.join("run.json")), "--out", s(&again)]);
    for name in ["metrics.jsonl", "final.ckpt", "best.ckpt", "vocab.json"] {
        assert_eq!(fs::read(t.run.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
    let metrics = jsonl(&t.run.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 4);
    assert!(metrics.iter().all(|m| m["l_total"].as_f64().unwrap().is_finite()));
}
