use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sar")).args(args).env_remove("SAR_NUM_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sar(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn masks_match_hand_derived_fixture() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["masks", "--intervals", "1,2,2,3", "--out", s(dir.path())]);
    for name in ["m_e.csv", "m_ds.csv", "m_dc.csv"] {
        let got = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let want = std::fs::read_to_string(fixture("masks_1_2_2_3").join(name)).unwrap();
        assert_eq!(got, want, "{name}");
    }
    let text = ok(&["masks", "--intervals", "1,2,2,3"]);
    assert!(text.starts_with("# encoder_self (6x6)\n#.....\n##....\n####..\n"));
    assert!(text.contains("# m_dc.csv\n1,0,0,0,0,0\n"));
}

#[test]
fn masked_mode_merges_the_visible_set() {
    let text = ok(&["masks", "--intervals", "3,5", "--masked"]);
    assert!(text.starts_with("# encoder_self (4x4)\n####\n####\n####\n####\n"));
    assert_eq!(code(&sar(&["masks", "--intervals", "8", "--masked"])), 2);
}

#[test]
fn train_with_zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--steps", "0", "--seed", "3"]);
    for f in ["model.ckpt", "loss.csv", "effective_config.json", "source.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv, "step,loss,smoothed_loss,sets\n");
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["train"]["steps"], 0);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&sar(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&sar(&[])), 1);
    assert_eq!(code(&sar(&["--help"])), 0);
    assert_eq!(code(&sar(&["train", "--plan", "diagonal-4-cosine", "--steps", "0"])), 2);
    assert_eq!(code(&sar(&["masks", "--intervals", "0,0"])), 2);
    assert_eq!(code(&sar(&["bench", "--n", "15"])), 2);
    let missing = sar(&["sample", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));

    let threads = Command::new(env!("CARGO_BIN_EXE_sar"))
        .args(["masks", "--intervals", "1,1"])
        .env("SAR_NUM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}

#[test]
fn bad_sampler_and_config_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--steps", "0"]);
    let ckpt = dir.path().join("model.ckpt");
    assert_eq!(code(&sar(&["sample", "--checkpoint", s(&ckpt), "--top-p", "0"])), 2);
    assert_eq!(code(&sar(&["sample", "--checkpoint", s(&ckpt), "--class", "9"])), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sed": 1}"#).unwrap();
    assert_eq!(code(&sar(&["train", "--config", s(&bad)])), 2);
}

#[test]
fn training_and_sampling_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        train(d.path(), &["--steps", "3", "--seed", "7", "--plan", "random-4-random"]);
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "model.ckpt"), read(&b, "model.ckpt"));
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));

    let ckpt = a.path().join("model.ckpt");
    let args = ["sample", "--checkpoint", s(&ckpt), "--count", "3", "--seed", "5"];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    let json: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(json["plan"], "random-4-random");
    assert_eq!(json["grids"].as_array().unwrap().len(), 3);
}

#[test]
fn greedy_sampling_ignores_the_cache_switch() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--steps", "2"]);
    let ckpt = dir.path().join("model.ckpt");
    let run = |cache: &str| {
        let v: Value = serde_json::from_str(&ok(&[
            "sample", "--checkpoint", s(&ckpt), "--plan", "roll-5-cosine", "--temp", "0", "--cache", cache, "--count", "2",
        ]))
        .unwrap();
        v["grids"].clone()
    };
    assert_eq!(run("on"), run("off"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    train(a.path(), &["--steps", "2", "--seed", "11", "--plan", "raster-4-cosine"]);
    let cfg = a.path().join("effective_config.json");
    let b = tempfile::tempdir().unwrap();
    ok(&["train", "--config", s(&cfg), "--out", s(b.path())]);
    let load = |d: &Path| -> Value {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(d.join("effective_config.json")).unwrap()).unwrap();
        v["out"] = Value::Null;
        v
    };
    assert_eq!(load(a.path()), load(b.path()));
    assert_eq!(std::fs::read(a.path().join("model.ckpt")).unwrap(), std::fs::read(b.path().join("model.ckpt")).unwrap());
}

#[test]
fn bench_reports_cheaper_cached_decoding() {
    let total = |cache: &str| -> u64 {
        let csv = ok(&["bench", "--n", "16", "--sets", "4", "--cache", cache]);
        let last = csv.lines().last().unwrap();
        assert!(last.contains(",total,"));
        last.split(',').nth(8).unwrap().parse().unwrap()
    };
    let (on, off) = (total("on"), total("off"));
    // sets of 1, 3, 5, 7 tokens: 340 vs 474 inner products per head and layer
    assert_eq!((on, off), (340 * 8, 474 * 8));
}

#[test]
fn paint_keeps_known_cells() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--steps", "2", "--plan", "random-16-random"]);
    let known = dir.path().join("known.json");
    std::fs::write(&known, r#"{"known": {"0": 5, "7": 2, "15": 1}}"#).unwrap();
    let pgm = dir.path().join("out.pgm");
    let v: Value = serde_json::from_str(&ok(&[
        "paint",
        "--checkpoint",
        s(&dir.path().join("model.ckpt")),
        "--known",
        s(&known),
        "--count",
        "4",
        "--pgm",
        s(&pgm),
    ]))
    .unwrap();
    for g in v["grids"].as_array().unwrap() {
        assert_eq!(g["tokens"][0], 5);
        assert_eq!(g["tokens"][7], 2);
        assert_eq!(g["tokens"][15], 1);
    }
    assert!(std::fs::read_to_string(pgm).unwrap().starts_with("P2\n4 16\n7\n5 "));
}

#[test]
fn raster_model_is_worse_in_reverse() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--steps", "300", "--plan", "raster-16-cosine"]);
    let data = dir.path().join("held.jsonl");
    ok(&["data", "--count", "300", "--seed", "9", "--out", s(&data), "--source-out", s(&dir.path().join("src.json"))]);
    let ckpt = dir.path().join("model.ckpt");
    let eval = |plan: &str| -> f64 {
        let v: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--plan", plan, "--data", s(&data)])).unwrap();
        assert_eq!(v["grids"], 300);
        v["nll_per_token"].as_f64().unwrap()
    };
    let forward = eval("raster-16-cosine");
    let reversed = eval("reversed-raster-16-cosine");
    assert!(reversed > forward + 0.2, "raster {forward} reversed {reversed}");
}
