use blockmark::bench::{calibrate_tau, clean_scores, run_bench, write_report, BenchConfig, CorpusSource, CSV_HEADER};
use blockmark::synth::synth_image;

fn config(input: CorpusSource, attacks: &[&str]) -> BenchConfig {
    BenchConfig {
        input,
        key_hex: Some("2a".repeat(32)),
        attacks: attacks.iter().map(|s| s.to_string()).collect(),
        timing: false,
        ..BenchConfig::default()
    }
}

#[test]
fn csv_is_identical_for_any_worker_count() {
    let attacks = ["noise:0.05", "crop:0.7", "rotate90"];
    let base = config(CorpusSource::Synthetic { seed: 2, count: 3 }, &attacks);
    let mut outputs = Vec::new();
    for workers in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let report = run_bench(&BenchConfig {
            workers,
            ..base.clone()
        })
        .unwrap();
        write_report(dir.path(), &report).unwrap();
        outputs.push((
            std::fs::read(dir.path().join("rows.csv")).unwrap(),
            std::fs::read(dir.path().join("rows_original.csv")).unwrap(),
            report.config_hash,
        ));
    }
    assert_eq!(outputs[0], outputs[1]);

    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * (attacks.len() + 1));
    assert!(rows[0].starts_with("synth_0000,clean,"));
    assert!(rows[1].starts_with("synth_0000,noise:0.05,"));
    assert!(rows[4].starts_with("synth_0001,clean,"));
}

#[test]
fn report_lists_every_attack_and_writes_roc_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_bench(&config(
        CorpusSource::Synthetic { seed: 3, count: 2 },
        &["jpeg:50", "bmshj18"],
    ))
    .unwrap();
    let labels: Vec<&str> = report.aggregates.iter().map(|a| a.attack.as_str()).collect();
    assert_eq!(labels, ["clean", "jpeg:50", "bmshj18"]);

    let clean = &report.aggregates[0];
    assert_eq!((clean.stats.n_pos, clean.stats.n_neg), (2, 2));
    assert_eq!(clean.stats.wdr, 1.0);

    // a codec attack that is not bundled fails every row but still reports
    let codec = &report.aggregates[2];
    assert_eq!((codec.stats.n_pos, codec.stats.n_neg, codec.failures), (0, 0, 4));
    assert!(codec.stats.wdr.is_nan());
    assert!(report
        .rows
        .iter()
        .filter(|r| r.attack == "bmshj18")
        .all(|r| r.error.is_some()));

    write_report(dir.path(), &report).unwrap();
    for name in [
        "rows.csv",
        "rows_original.csv",
        "report.json",
        "roc_clean.csv",
        "roc_jpeg_50.csv",
        "roc_bmshj18.csv",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config_hash"], report.config_hash.as_str());
}

#[test]
fn undecodable_files_become_failed_rows() {
    let dir = tempfile::tempdir().unwrap();
    synth_image(4, 0).save_png(dir.path().join("a.png")).unwrap();
    synth_image(4, 1).save_png(dir.path().join("b.png")).unwrap();
    std::fs::write(dir.path().join("c.png"), b"not an image").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let report = run_bench(&config(
        CorpusSource::Dir {
            path: dir.path().to_path_buf(),
        },
        &["blur:5,1.0"],
    ))
    .unwrap();
    assert_eq!(report.images, 3);
    assert_eq!(report.rows.len(), 6);
    let broken: Vec<_> = report.rows.iter().filter(|r| r.image_id.starts_with("c")).collect();
    assert_eq!(broken.len(), 2);
    assert!(broken.iter().all(|r| r.error.is_some() && r.score.is_nan()));
    assert_eq!(report.aggregates[1].failures, 2);
    assert_eq!(report.aggregates[1].stats.n_pos, 2);
}

#[test]
fn too_small_corpus_is_rejected() {
    assert!(run_bench(&config(CorpusSource::Synthetic { seed: 1, count: 1 }, &[])).is_err());
}

#[test]
fn calibrated_tau_meets_target_on_clean_scores() {
    let cfg = config(CorpusSource::Synthetic { seed: 5, count: 6 }, &[]);
    let (pos, neg) = clean_scores(&cfg).unwrap();
    assert_eq!((pos.len(), neg.len()), (6, 6));
    let tau = calibrate_tau(&neg, 0.0).unwrap();
    assert!(neg.iter().all(|&s| s <= tau));
    assert!(pos.iter().all(|&s| s > tau));
}
