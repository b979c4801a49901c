//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The corpus is 100 synthetic images unless `BLOCKMARK_CORPUS_DIR` points at
//! a directory of photos.

use std::collections::VecDeque;
use std::path::PathBuf;

use blockmark::attacks::{crop_random, derive_seed, seed_attack, splice_insert, SeedMode};
use blockmark::bench::{load_corpus, run_bench, AttackAggregate, BenchConfig, BenchReport, CorpusSource};
use blockmark::detect::{detect_block, hypothesis_threshold, Cell, DetectionMap};
use blockmark::embed::embed_block_unquantized;
use blockmark::keying::get_seed;
use blockmark::metrics::psnr;
use blockmark::wavelet::{dwt2_multilevel, idwt2_multilevel};
use blockmark::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

const TAU: f64 = 0.37;
const KEY: [u8; 32] = [42; 32];
const WRONG_KEY: [u8; 32] = [7; 32];

struct Outcome {
    lines: Vec<String>,
    failed: usize,
}

impl Outcome {
    fn check(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let line = format!("criterion {id:<2} {verdict}  {name}: {detail}");
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failed += 1;
        }
    }

    fn info(&self, text: String) {
        println!("             info  {text}");
    }
}

fn source() -> CorpusSource {
    match std::env::var_os("BLOCKMARK_CORPUS_DIR") {
        Some(dir) => CorpusSource::Dir {
            path: PathBuf::from(dir),
        },
        None => CorpusSource::Synthetic { seed: 1, count: 100 },
    }
}

fn key() -> KeySet {
    KeySet::single(SecretKey::new(KEY.to_vec()).unwrap())
}

fn wrong_key() -> KeySet {
    KeySet::single(SecretKey::new(WRONG_KEY.to_vec()).unwrap())
}

fn bench(params: WatermarkParams, attacks: &[&str]) -> BenchReport {
    let cfg = BenchConfig {
        input: source(),
        params,
        key_hex: Some(hex::encode(KEY)),
        attacks: attacks.iter().map(|s| s.to_string()).collect(),
        tau: TAU,
        timing: false,
        ..BenchConfig::default()
    };
    run_bench(&cfg).expect("bench runs")
}

fn agg<'a>(report: &'a BenchReport, label: &str) -> &'a AttackAggregate {
    report
        .aggregates
        .iter()
        .find(|a| a.attack == label)
        .expect("attack in report")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided Mann-Whitney U test with tie correction (normal approximation).
fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, usize)> = a.iter().map(|&v| (v, 0)).chain(b.iter().map(|&v| (v, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = all.iter().zip(&ranks).filter(|(x, _)| x.1 == 0).map(|(_, r)| r).sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - n1 * n2 / 2.0) / var.sqrt();
    2.0 * (1.0 - Normal::standard().cdf(z.abs()))
}

fn corpus() -> Vec<(String, ImageBuf)> {
    load_corpus(&source())
        .expect("corpus loads")
        .into_iter()
        .filter_map(|(id, img)| img.ok().map(|i| (id, i)))
        .collect()
}

fn criterion_1(out: &mut Outcome) {
    let a = hypothesis_threshold(144, 0.05);
    let b = hypothesis_threshold(144, 0.01);
    // independent oracle: the normal quantile computed here, not in the crate
    let oracle = |alpha: f64| {
        let z = Normal::standard().inverse_cdf(1.0 - alpha);
        (z / 2.0 * 12.0 + 72.0).ceil() as u32
    };
    out.check(
        "1",
        "block threshold",
        a == 82 && b == 86 && a == oracle(0.05) && b == oracle(0.01),
        format!("c(144, 0.05) = {a}, c(144, 0.01) = {b}"),
    );
}

fn criteria_2_3_7(out: &mut Outcome, base: &BenchReport, robust: &BenchReport) {
    let clean = agg(base, "clean");
    let wm_area = mean(base.rows.iter().filter(|r| r.attack == "clean").map(|r| r.score));
    let orig_area = mean(
        base.rows_original
            .iter()
            .filter(|r| r.attack == "clean")
            .map(|r| r.score),
    );
    out.check(
        "2",
        "detected area and separability",
        wm_area >= 0.85 && orig_area <= 0.25 && clean.stats.auc >= 0.99,
        format!(
            "watermarked {:.1}% (>= 85), originals {:.1}% (<= 25), AUC {:.4} (>= 0.99)",
            100.0 * wm_area,
            100.0 * orig_area,
            clean.stats.auc
        ),
    );
    out.check(
        "3",
        "clean WDR and FPR at tau 0.37",
        (clean.stats.wdr - 1.0).abs() <= 0.02 && clean.stats.fpr <= 0.08,
        format!(
            "WDR {:.3} (1.00 +- 0.02), FPR {:.3} (<= 0.08)",
            clean.stats.wdr, clean.stats.fpr
        ),
    );
    let rclean = agg(robust, "clean");
    out.check(
        "7",
        "imperceptibility",
        clean.mean_psnr_db >= 32.0 && clean.mean_ssim >= 0.96 && rclean.mean_psnr_db >= 29.0,
        format!(
            "l=8 PSNR {:.2} dB (>= 32), SSIM {:.4} (>= 0.96); l=14 entropy PSNR {:.2} dB (>= 29)",
            clean.mean_psnr_db, clean.mean_ssim, rclean.mean_psnr_db
        ),
    );
}

fn criteria_4_5(out: &mut Outcome, base: &BenchReport, robust: &BenchReport) {
    let targets = [
        ("jpeg:50", 0.86),
        ("blur:5,1.0", 0.87),
        ("noise:0.05", 0.76),
        ("rotate90", 0.87),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, min) in targets {
        let w = agg(robust, label).stats.wdr;
        pass &= w >= min;
        parts.push(format!("{label} {w:.3} (>= {min})"));
    }
    out.check("4", "robustness, l=14 entropy", pass, parts.join(", "));

    let c = agg(robust, "contrast:0.5").stats;
    out.check(
        "5",
        "contrast fragility, l=14 entropy",
        c.wdr <= 0.35,
        format!("contrast:0.5 WDR {:.3} (<= 0.35)", c.wdr),
    );
    let c8 = agg(base, "contrast:0.5").stats;
    out.info(format!(
        "contrast:0.5 at l=8: WDR {:.3}, FPR on contrast-reduced originals {:.3}",
        c8.wdr, c8.fpr
    ));
    let rc = agg(robust, "clean").stats;
    out.info(format!("l=14 entropy clean: WDR {:.3}, FPR {:.3}", rc.wdr, rc.fpr));
}

fn criterion_6(out: &mut Outcome, images: &[(String, ImageBuf)]) {
    let params = WatermarkParams::default();
    let keyset = key();
    let cfg = CropSearchConfig::default();
    let rows: Vec<[bool; 5]> = images
        .par_iter()
        .map(|(id, img)| {
            let (wm, _) = embed_image(img, &params, &keyset).unwrap();
            let search = |im: &ImageBuf| crop_search(im, &params, &keyset, cfg.stop_p, &cfg).unwrap().decision;
            let mut r = [false; 5];
            for (j, keep) in [0.7, 0.5].into_iter().enumerate() {
                let seed = derive_seed(0, &format!("{id}/crop:{keep}"));
                r[j] = search(&crop_random(&wm, keep, seed).unwrap().0);
                r[3 + j] = search(&crop_random(img, keep, seed).unwrap().0);
            }
            r[2] = search(img);
            r
        })
        .collect();
    let rate = |j: usize| rows.iter().filter(|r| r[j]).count() as f64 / rows.len() as f64;
    let (tpr70, tpr50, fpr) = (rate(0), rate(1), rate(2));
    out.check(
        "6",
        "crop search, fixed threshold 0.8",
        images.len() >= 100 && tpr70 >= 0.85 && tpr50 >= 0.65 && fpr <= 0.03,
        format!(
            "{} images; TPR keep 0.7 {:.3} (>= 0.85), keep 0.5 {:.3} (>= 0.65); FPR on originals {:.3} (<= 0.03)",
            images.len(),
            tpr70,
            tpr50,
            fpr
        ),
    );
    out.info(format!(
        "FPR on cropped originals: keep 0.7 {:.3}, keep 0.5 {:.3}",
        rate(3),
        rate(4)
    ));
}

fn criterion_8(out: &mut Outcome, images: &[(String, ImageBuf)]) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = WatermarkParams::default();

    // (a) sub-block LL equals 2^d times the sub-block mean
    let mut ll_err: f64 = 0.0;
    for _ in 0..1000 {
        let sub: Vec<f64> = (0..64).map(|_| f64::from(rng.random::<u8>())).collect();
        let pyr = dwt2_multilevel(&sub, 8, 3).unwrap();
        let mean = sub.iter().sum::<f64>() / 64.0;
        ll_err = ll_err.max((pyr.ll[0] - 8.0 * mean).abs());
    }

    // (b) roundtrip
    let mut rt_err: f64 = 0.0;
    for _ in 0..200 {
        let block: Vec<f64> = (0..96 * 96).map(|_| rng.random_range(-300.0..300.0)).collect();
        let back = idwt2_multilevel(&dwt2_multilevel(&block, 96, 3).unwrap());
        rt_err = rt_err.max(block.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    // (c) before quantisation every coefficient that was not capped is green
    let secret = SecretKey::new(KEY.to_vec()).unwrap();
    let mut non_green = 0u64;
    let mut checked = 0u64;
    for (_, img) in images.iter().take(10) {
        let plane = img.channel_plane(0);
        for y in (0..img.height() - 95).step_by(96) {
            for x in (0..img.width() - 95).step_by(96) {
                let block = plane.square(y, x, 96);
                let part = Partition::new(
                    &secret,
                    get_seed(&block, params.round_val),
                    params.interval_len,
                    params.range,
                );
                let (real, stats) = embed_block_unquantized(&block, &params, &part);
                let values: Vec<f64> = real.unwrap_or_else(|| block.iter().map(|&v| f64::from(v)).collect());
                let mut red = 0u64;
                for sy in (0..96).step_by(8) {
                    for sx in (0..96).step_by(8) {
                        let sub: Vec<f64> = (0..64).map(|i| values[(sy + i / 8) * 96 + sx + i % 8]).collect();
                        let c = dwt2_multilevel(&sub, 8, 3).unwrap().ll[0];
                        red += u64::from(!part.is_green(c));
                    }
                }
                non_green += red.saturating_sub(stats.coefficients_capped);
                checked += 144;
            }
        }
    }

    // (d) null calibration on uniform random pixels. Every such block has the
    // same seed, so a single key fixes one partition for all of them; keys are
    // drawn per image to average over partitions.
    let random_key = |r: &mut ChaCha8Rng| {
        let bytes: Vec<u8> = (0..32).map(|_| r.random()).collect();
        KeySet::single(SecretKey::new(bytes).unwrap())
    };
    let mut rejected = 0usize;
    let mut rejected_fixed = 0usize;
    let mut blocks = 0usize;
    for i in 0..40u64 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + i);
        let img = ImageBuf::from_fn(480, 480, 3, |_, _, _| r.random()).unwrap();
        let ks = random_key(&mut r);
        let res = detect_image(&img, &params, &ks, TAU).unwrap();
        rejected += res.raw_map.count(Cell::Green);
        blocks += res.raw_map.cells.len();
        rejected_fixed += detect_image(&img, &params, &key(), TAU)
            .unwrap()
            .raw_map
            .count(Cell::Green);
    }
    let null_rate = rejected as f64 / blocks as f64;
    let fixed_rate = rejected_fixed as f64 / blocks as f64;
    // single-channel counts over 1000 independent blocks, one key each
    let single: Vec<f64> = (0..1000u64)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(5000 + i);
            let b: Vec<u8> = (0..96 * 96).map(|_| r.random()).collect();
            let bytes: Vec<u8> = (0..32).map(|_| r.random()).collect();
            let part = Partition::new(
                &SecretKey::new(bytes).unwrap(),
                get_seed(&b, params.round_val),
                params.interval_len,
                params.range,
            );
            f64::from(detect_block(&b, &params, &part))
        })
        .collect();
    let single_mean = mean(single.iter().copied());
    let single_var = single.iter().map(|v| (v - single_mean).powi(2)).sum::<f64>() / (single.len() - 1) as f64;
    let single_se = (single_var / single.len() as f64).sqrt();
    let single_ok = (single_mean - 72.0).abs() <= 3.0 * single_se;

    // (e) a wrong key sees watermarked images as it sees unmarked ones
    let (wrong, null): (Vec<f64>, Vec<f64>) = images
        .par_iter()
        .map(|(_, img)| {
            let (wm, _) = embed_image(img, &params, &key()).unwrap();
            (
                detect_image(&wm, &params, &wrong_key(), TAU).unwrap().score,
                detect_image(img, &params, &wrong_key(), TAU).unwrap().score,
            )
        })
        .unzip();
    let p = mann_whitney_p(&wrong, &null);

    let checks = [
        ll_err < 1e-6,
        rt_err < 1e-9,
        non_green == 0,
        null_rate <= params.alpha + 0.02 && single_ok,
        p > 0.01,
    ];
    let failed: Vec<String> = checks
        .iter()
        .zip(["a", "b", "c", "d", "e"])
        .filter(|(ok, _)| !**ok)
        .map(|(_, n)| n.to_string())
        .collect();
    out.check(
        "8",
        "oracle equivalence",
        failed.is_empty(),
        format!(
            "(a) LL err {ll_err:.1e}; (b) roundtrip err {rt_err:.1e}; (c) {non_green} uncapped red of {checked}; \
             (d) null block rate {null_rate:.4} over {blocks} blocks (<= {:.2}), single-channel mean {single_mean:.2} vs 72 +- {:.2}; \
             (e) wrong-key scores watermarked vs unmarked p = {p:.3} (means {:.3} / {:.3}){}",
            params.alpha + 0.02,
            3.0 * single_se,
            mean(wrong.iter().copied()),
            mean(null.iter().copied()),
            if failed.is_empty() { String::new() } else { format!("; failing parts: {}", failed.join(", ")) }
        ),
    );
    out.info(format!("null block rate with the single fixed key: {fixed_rate:.4}"));
}

/// Red components under 8-connectivity, each as a list of cells.
fn red_components(map: &DetectionMap) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; map.cells.len()];
    let mut comps = Vec::new();
    for start in 0..map.cells.len() {
        if seen[start] || map.cells[start] != Cell::Red {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / map.cols, i % map.cols);
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= map.rows as i64 || nc >= map.cols as i64 {
                        continue;
                    }
                    let j = nr as usize * map.cols + nc as usize;
                    if !seen[j] && map.cells[j] == Cell::Red {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn criterion_9(out: &mut Outcome, images: &[(String, ImageBuf)]) {
    let params = WatermarkParams::default();
    let m = params.block;
    let eligible: Vec<usize> = (0..images.len())
        .filter(|&i| images[i].1.height() >= 4 * m && images[i].1.width() >= 4 * m)
        .take(20)
        .collect();
    let results: Vec<(f64, bool)> = eligible
        .par_iter()
        .map(|&i| {
            let img = &images[i].1;
            let donor = &images[(i + 1) % images.len()].1;
            let (wm, _) = embed_image(img, &params, &key()).unwrap();
            let patch = donor.crop(0, 0, 3 * m, 3 * m).unwrap();
            let spliced = splice_insert(&wm, &patch, (m, m)).unwrap();
            let map = detect_image(&spliced, &params, &key(), TAU).unwrap().raw_map;
            // blocks 1..=3 on both axes are fully covered
            let red = (1..=3)
                .flat_map(|r| (1..=3).map(move |c| (r, c)))
                .filter(|&(r, c)| map.get(r, c) == Cell::Red)
                .count();
            let comps = red_components(&map);
            let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
            // dilated box covers block rows and columns 0..=4
            let inside = largest > 0
                && comps
                    .iter()
                    .filter(|c| c.len() == largest)
                    .all(|c| c.iter().all(|&(r, col)| r <= 4 && col <= 4));
            (red as f64 / 9.0, inside)
        })
        .collect();
    // every trial covers nine blocks, so the pooled fraction is the mean
    let pooled = mean(results.iter().map(|r| r.0));
    let all_inside = results.iter().all(|r| r.1);
    out.check(
        "9",
        "splice localisation",
        !results.is_empty() && pooled >= 0.6 && all_inside,
        format!(
            "{} spliced images; red fraction of covered blocks {:.3} (>= 0.60); largest red cluster inside dilated box in {}/{}",
            results.len(),
            pooled,
            results.iter().filter(|r| r.1).count(),
            results.len()
        ),
    );
    out.info(format!(
        "per image: {}/{} splices reach 60% red, lowest {:.2}",
        results.iter().filter(|r| r.0 >= 0.6).count(),
        results.len(),
        results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min)
    ));
}

fn criterion_10(out: &mut Outcome, images: &[(String, ImageBuf)]) {
    let params = WatermarkParams::default();
    let m = params.block;
    let results: Vec<(usize, usize, f64, f64)> = images
        .par_iter()
        .map(|(_, img)| {
            let (wm, _) = embed_image(img, &params, &key()).unwrap();
            let attacked = seed_attack(&wm, &params, SeedMode::Nearest).unwrap();
            let mut changed = 0;
            let mut total = 0;
            for c in 0..wm.channels() {
                let (a, b) = (wm.channel_plane(c), attacked.channel_plane(c));
                for y in (0..=wm.height() - m).step_by(m) {
                    for x in (0..=wm.width() - m).step_by(m) {
                        total += 1;
                        changed += usize::from(
                            get_seed(&a.square(y, x, m), params.round_val)
                                != get_seed(&b.square(y, x, m), params.round_val),
                        );
                    }
                }
            }
            (changed, total, psnr(img, &wm).unwrap(), psnr(&wm, &attacked).unwrap())
        })
        .collect();
    let changed: usize = results.iter().map(|r| r.0).sum();
    let total: usize = results.iter().map(|r| r.1).sum();
    let min_drop = results.iter().map(|r| r.2 - r.3).fold(f64::INFINITY, f64::min);
    out.check(
        "10",
        "seed attack",
        changed == total && min_drop >= 6.0,
        format!(
            "{changed}/{total} block seeds changed; PSNR clean embed {:.2} dB, after attack {:.2} dB, smallest per-image drop {:.2} dB (>= 6)",
            mean(results.iter().map(|r| r.2)),
            mean(results.iter().map(|r| r.3)),
            min_drop
        ),
    );
}

fn main() {
    let images = corpus();
    println!("acceptance corpus: {} images", images.len());
    let mut out = Outcome {
        lines: Vec::new(),
        failed: 0,
    };
    criterion_1(&mut out);
    let base = bench(WatermarkParams::default(), &["contrast:0.5"]);
    let robust = bench(
        WatermarkParams::robust(),
        &["jpeg:50", "blur:5,1.0", "noise:0.05", "rotate90", "contrast:0.5"],
    );
    criteria_2_3_7(&mut out, &base, &robust);
    criteria_4_5(&mut out, &base, &robust);
    criterion_6(&mut out, &images);
    criterion_8(&mut out, &images);
    criterion_9(&mut out, &images);
    criterion_10(&mut out, &images);

    println!("\nsummary");
    let mut lines = out.lines.clone();
    lines.sort_by_key(|l| l[10..12].trim().parse::<u32>().unwrap_or(0));
    for l in &lines {
        println!("{l}");
    }
    println!("{} of {} criteria passed", lines.len() - out.failed, lines.len());
    if out.failed > 0 {
        std::process::exit(1);
    }
}
