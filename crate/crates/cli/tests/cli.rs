use std::path::Path;
use std::process::{Command, Output};

use blockmark::ImageBuf;
use serde_json::Value;

const KEY: &str = "2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a2a";

fn blockmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockmark"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two synthetic originals in `dir/orig` and their watermarked copies in `dir/wm`.
fn setup(dir: &Path) {
    let orig = dir.join("orig");
    let out = blockmark(&["gen-corpus", "--out-dir", p(&orig), "--count", "2", "--seed", "4"]);
    assert!(out.status.success());
    let out = blockmark(&["--key-hex", KEY, "embed", p(&orig), "--out-dir", p(&dir.join("wm"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn embed_then_detect() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let wm = dir.path().join("wm");
    for id in ["synth_0000", "synth_0001"] {
        assert!(wm.join(format!("{id}.png")).exists());
        let report: Value = serde_json::from_slice(&std::fs::read(wm.join(format!("{id}.json"))).unwrap()).unwrap();
        assert!(report["report"]["blocks_embedded"].as_u64().unwrap() > 0);
        assert!(report["psnr_db"].as_f64().unwrap() > 40.0);
    }

    let map = dir.path().join("map.png");
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "detect",
        p(&wm.join("synth_0000.png")),
        "--map-out",
        p(&map),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let res = json(&out);
    assert_eq!(res["decision"], true);
    assert_eq!(res["tau"], 0.37);
    assert_eq!(res["alpha"], 0.05);
    assert_eq!(res["offsets_tested"], 1);
    assert!(ImageBuf::load(&map).is_ok());

    let out = blockmark(&["--key-hex", KEY, "detect", p(&dir.path().join("orig/synth_0000.png"))]);
    let res = json(&out);
    let expected = if res["decision"].as_bool().unwrap() { 0 } else { 1 };
    assert_eq!(out.status.code(), Some(expected));
    assert!(res["score"].as_f64().unwrap() < 0.5);
}

#[test]
fn tau_from_params_json() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let img = dir.path().join("wm/synth_0001.png");
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "--params",
        r#"{"l":8,"m":96,"tau":1.0}"#,
        "detect",
        p(&img),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["tau"], 1.0);
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "--params",
        r#"{"tau":1.0}"#,
        "detect",
        p(&img),
        "--tau",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn crop_search_finds_cropped_watermark() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cropped = dir.path().join("cropped.png");
    let out = blockmark(&[
        "attack",
        p(&dir.path().join("wm/synth_0000.png")),
        "--op",
        "crop:0.7",
        "--out",
        p(&cropped),
    ]);
    assert!(out.status.success());
    let ops = json(&out);
    assert!(ops["ops"][0]["crop_offset"].is_array());
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "detect",
        p(&cropped),
        "--crop-search",
        "--stop-p",
        "0.8",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let res = json(&out);
    assert!(res["offsets_tested"].as_u64().unwrap() >= 1);
    assert!(res["crop_offset"].is_array());
}

#[test]
fn four_quarter_turns_are_identity() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let src = dir.path().join("wm/synth_0000.png");
    let dst = dir.path().join("turned.png");
    let mut args = vec!["--rng-seed", "3", "attack", p(&src), "--out", p(&dst)];
    for _ in 0..4 {
        args.extend(["--op", "rotate90"]);
    }
    assert!(blockmark(&args).status.success());
    assert_eq!(ImageBuf::load(&src).unwrap(), ImageBuf::load(&dst).unwrap());
}

#[test]
fn attack_seeds_follow_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let src = dir.path().join("orig/synth_0000.png");
    let run = |seed: &str, out: &str| {
        let out = blockmark(&[
            "--rng-seed",
            seed,
            "attack",
            p(&src),
            "--op",
            "noise:0.05",
            "--out",
            p(&dir.path().join(out)),
        ]);
        assert!(out.status.success());
        json(&out)["ops"][0]["rng_seed"].as_u64().unwrap()
    };
    assert_eq!(run("1", "a.png"), run("1", "b.png"));
    assert_ne!(run("1", "a.png"), run("2", "c.png"));
    assert_eq!(
        ImageBuf::load(dir.path().join("a.png")).unwrap(),
        ImageBuf::load(dir.path().join("b.png")).unwrap()
    );
}

#[test]
fn errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let img = dir.path().join("orig/synth_0000.png");

    let out = blockmark(&[
        "attack",
        p(&img),
        "--op",
        "swirl",
        "--out",
        p(&dir.path().join("x.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("known ops"));

    let out = blockmark(&["detect", p(&img)]);
    assert_eq!(out.status.code(), Some(2), "missing key");

    let out = blockmark(&["--key-hex", "abcd", "detect", p(&img)]);
    assert_eq!(out.status.code(), Some(2), "short key");

    let out = blockmark(&["--key-hex", KEY, "detect", p(&dir.path().join("missing.png"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = blockmark(&[
        "--key-hex",
        KEY,
        "embed",
        p(&img),
        "--out-dir",
        p(&dir.path().join("j")),
        "--format",
        "jpeg",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("j/synth_0000.jpg").exists());
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "embed",
        p(&img),
        "--out-dir",
        p(&dir.path().join("j")),
        "--format",
        "jpeg",
        "--allow-lossy",
    ]);
    assert!(out.status.success());
    assert!(dir.path().join("j/synth_0000.jpg").exists());

    let out = blockmark(&[
        "attack",
        p(&img),
        "--op",
        "rotate90",
        "--out",
        p(&dir.path().join("x.jpg")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn map_writes_overlay() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let src = dir.path().join("wm/synth_0001.png");
    let out_png = dir.path().join("overlay.png");
    let out = blockmark(&[
        "--key-hex",
        KEY,
        "map",
        p(&src),
        "--out",
        p(&out_png),
        "--grid",
        "--raw",
    ]);
    assert!(out.status.success());
    let overlay = ImageBuf::load(&out_png).unwrap();
    assert_eq!(overlay.dims(), ImageBuf::load(&src).unwrap().dims());
}

#[test]
fn bench_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.json");
    std::fs::write(&config, r#"{"attacks": ["jpeg:50", "rotate90"], "timing": false}"#).unwrap();
    let mut csvs = Vec::new();
    for (workers, sub) in [("1", "a"), ("2", "b")] {
        let out_dir = dir.path().join(sub);
        let out = blockmark(&[
            "--key-hex",
            KEY,
            "--workers",
            workers,
            "bench",
            "--config",
            p(&config),
            "--synthetic",
            "2",
            "--out-dir",
            p(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let res = json(&out);
        assert_eq!(res["images"], 2);
        assert_eq!(res["aggregates"].as_array().unwrap().len(), 3);
        csvs.push(std::fs::read(out_dir.join("rows.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let out = blockmark(&[
        "--key-hex",
        KEY,
        "calibrate-tau",
        "--synthetic",
        "3",
        "--target-fpr",
        "0.0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let res = json(&out);
    let tau = res["tau"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&tau));
    assert!(res["table"].as_array().unwrap().len() >= 19);
}
