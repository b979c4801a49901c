//! Corpus benchmark: embed, attack, detect and aggregate.
//!
//! Every image is embedded once. Each configured attack is applied to the
//! watermarked copy and, for false-positive estimates, to the original with the
//! same per-image RNG seed; both go through the same detection path. Rows are
//! sorted by image id, then attack order, so the CSV output does not depend on
//! scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{derive_seed, AttackKind, AttackSpec};
use crate::detect::{crop_search, detect_image, CropSearchConfig, DetectionResult};
use crate::embed::embed_image_with;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::keying::{build_keyset, KeySet, PartitionTable, SecretKey};
use crate::metrics::{combined_quality, out_of_scope, psnr, roc_points, ssim, DetectionStats, Orientation};
use crate::params::WatermarkParams;
use crate::synth::synth_corpus;

pub const CSV_HEADER: [&str; 10] = [
    "image_id",
    "attack",
    "score",
    "decision",
    "crop_dy",
    "crop_dx",
    "offsets_tested",
    "psnr_db",
    "ssim",
    "runtime_ms",
];

pub const CLEAN: &str = "clean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Every decodable image file in a directory (not recursive).
    Dir { path: PathBuf },
    /// Procedurally generated images.
    Synthetic { seed: u64, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub input: CorpusSource,
    pub params: WatermarkParams,
    /// Never serialised; the config hash covers everything else.
    #[serde(skip_serializing)]
    pub key_hex: Option<String>,
    pub key_file: Option<PathBuf>,
    pub attacks: Vec<String>,
    pub tau: f64,
    pub crop_search: CropSearchConfig,
    /// Retry misaligned detections (rotations) with crop search.
    pub rotate_fallback: bool,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub rng_seed: u64,
    /// Record wall-clock time per row; off gives byte-identical reruns.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            input: CorpusSource::Synthetic { seed: 1, count: 100 },
            params: WatermarkParams::default(),
            key_hex: None,
            key_file: None,
            attacks: [
                "jpeg:50",
                "blur:5,1.0",
                "noise:0.05",
                "rotate90",
                "contrast:0.5",
                "brightness:0.5",
            ]
            .map(String::from)
            .to_vec(),
            tau: 0.37,
            crop_search: CropSearchConfig::default(),
            rotate_fallback: true,
            output_dir: PathBuf::from("bench_out"),
            workers: 0,
            rng_seed: 0,
            timing: true,
        }
    }
}

impl BenchConfig {
    /// SHA-256 over the serialised config. Key material is excluded, and so is
    /// the worker count, which never changes results.
    pub fn hash(&self) -> String {
        let mut canon = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = canon.as_object_mut() {
            obj.remove("workers");
        }
        hex::encode(Sha256::digest(canon.to_string().as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn keyset(&self) -> Result<KeySet> {
        let key = match (&self.key_hex, &self.key_file) {
            (Some(h), _) => SecretKey::from_hex(h)?,
            (None, Some(f)) => SecretKey::from_hex(std::fs::read_to_string(f)?.trim())?,
            (None, None) => return Err(Error::InvalidKey("no key given".into())),
        };
        build_keyset(key, self.params.key_count)
    }

    fn parsed_attacks(&self) -> Result<Vec<AttackSpec>> {
        self.attacks.iter().map(|a| a.parse()).collect()
    }
}

/// Loads the corpus sorted by id. Files that fail to decode are returned as
/// errors so they surface as failed rows.
pub fn load_corpus(source: &CorpusSource) -> Result<Vec<(String, Result<ImageBuf>)>> {
    match source {
        CorpusSource::Synthetic { seed, count } => Ok(synth_corpus(*seed, *count)
            .into_iter()
            .map(|(id, img)| (id, Ok(img)))
            .collect()),
        CorpusSource::Dir { path } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_path(p))
                .collect();
            files.sort();
            Ok(files
                .into_par_iter()
                .map(|p| {
                    let id = p
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    (id, ImageBuf::load(&p))
                })
                .collect())
        }
    }
}

pub fn is_image_path(p: &Path) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    matches!(
        ext.as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "tif" | "tiff" | "webp")
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub image_id: String,
    pub attack: String,
    pub score: f64,
    pub decision: bool,
    pub crop_offset: Option<(usize, usize)>,
    pub offsets_tested: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BenchRow {
    fn failed(image_id: &str, attack: &str, err: &Error) -> Self {
        Self {
            image_id: image_id.to_string(),
            attack: attack.to_string(),
            score: f64::NAN,
            decision: false,
            crop_offset: None,
            offsets_tested: 0,
            psnr_db: f64::NAN,
            ssim: f64::NAN,
            runtime_ms: 0,
            error: Some(err.to_string()),
        }
    }

    fn record(&self) -> [String; 10] {
        let (dy, dx) = match self.crop_offset {
            Some((y, x)) => (y.to_string(), x.to_string()),
            None => (String::new(), String::new()),
        };
        [
            self.image_id.clone(),
            self.attack.clone(),
            fmt_float(self.score),
            self.decision.to_string(),
            dy,
            dx,
            self.offsets_tested.to_string(),
            fmt_float(self.psnr_db),
            fmt_float(self.ssim),
            self.runtime_ms.to_string(),
        ]
    }
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAggregate {
    pub attack: String,
    pub stats: DetectionStats,
    pub failures: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    /// Normalised quality across the report's attacks; `None` for the clean row.
    pub combined_quality: Option<f64>,
    pub out_of_scope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub tau: f64,
    pub alpha: f64,
    pub images: usize,
    pub rows: Vec<BenchRow>,
    pub rows_original: Vec<BenchRow>,
    pub aggregates: Vec<AttackAggregate>,
    pub quality_normalisation: String,
    pub lpips: String,
}

struct Detector<'a> {
    params: &'a WatermarkParams,
    keyset: &'a KeySet,
    tau: f64,
    crop: &'a CropSearchConfig,
    rotate_fallback: bool,
}

impl Detector<'_> {
    fn run(&self, img: &ImageBuf, kind: Option<&AttackKind>) -> Result<DetectionResult> {
        match kind {
            Some(AttackKind::CropRandom { .. }) => crop_search(img, self.params, self.keyset, self.tau, self.crop),
            Some(AttackKind::Rotate90 { .. }) if self.rotate_fallback => {
                let aligned = detect_image(img, self.params, self.keyset, self.tau)?;
                if aligned.decision {
                    Ok(aligned)
                } else {
                    crop_search(img, self.params, self.keyset, self.tau, self.crop)
                }
            }
            _ => detect_image(img, self.params, self.keyset, self.tau),
        }
    }
}

fn row_from(
    image_id: &str,
    attack: &str,
    res: &DetectionResult,
    quality: (f64, f64),
    started: Option<Instant>,
) -> BenchRow {
    BenchRow {
        image_id: image_id.to_string(),
        attack: attack.to_string(),
        score: res.score,
        decision: res.decision,
        crop_offset: res.crop_offset,
        offsets_tested: res.offsets_tested,
        psnr_db: quality.0,
        ssim: quality.1,
        runtime_ms: started.map_or(0, |t| t.elapsed().as_millis() as u64),
        error: None,
    }
}

fn quality_pair(a: &ImageBuf, b: &ImageBuf) -> (f64, f64) {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return (f64::NAN, f64::NAN);
    }
    (psnr(a, b).unwrap_or(f64::NAN), ssim(a, b).unwrap_or(f64::NAN))
}

struct ImageRows {
    watermarked: Vec<BenchRow>,
    original: Vec<BenchRow>,
}

fn process_image(
    id: &str,
    img: &Result<ImageBuf>,
    cfg: &BenchConfig,
    attacks: &[AttackSpec],
    table: &PartitionTable,
    det: &Detector<'_>,
) -> ImageRows {
    let labels: Vec<String> = std::iter::once(CLEAN.to_string())
        .chain(attacks.iter().map(|a| a.to_string()))
        .collect();
    let fail_all = |e: &Error| ImageRows {
        watermarked: labels.iter().map(|l| BenchRow::failed(id, l, e)).collect(),
        original: labels.iter().map(|l| BenchRow::failed(id, l, e)).collect(),
    };
    let img = match img {
        Ok(i) => i,
        Err(e) => return fail_all(e),
    };
    let clock = || cfg.timing.then(Instant::now);

    let t0 = clock();
    let wm = match embed_image_with(img, &cfg.params, table) {
        Ok((wm, _)) => wm,
        Err(e) => return fail_all(&e),
    };
    let mut out = ImageRows {
        watermarked: Vec::with_capacity(labels.len()),
        original: Vec::with_capacity(labels.len()),
    };
    let clean_quality = quality_pair(img, &wm);
    out.watermarked.push(match det.run(&wm, None) {
        Ok(r) => row_from(id, CLEAN, &r, clean_quality, t0),
        Err(e) => BenchRow::failed(id, CLEAN, &e),
    });
    let t0 = clock();
    out.original.push(match det.run(img, None) {
        Ok(r) => row_from(id, CLEAN, &r, (f64::INFINITY, 1.0), t0),
        Err(e) => BenchRow::failed(id, CLEAN, &e),
    });

    for (spec, label) in attacks.iter().zip(&labels[1..]) {
        let seeded = spec.with_seed(derive_seed(cfg.rng_seed, &format!("{id}/{label}")));
        for (source, rows) in [(&wm, &mut out.watermarked), (img, &mut out.original)] {
            let t0 = clock();
            let row = seeded
                .apply(source, &cfg.params)
                .and_then(|attacked| {
                    let res = det.run(&attacked.image, Some(&spec.kind))?;
                    Ok(row_from(id, label, &res, quality_pair(source, &attacked.image), t0))
                })
                .unwrap_or_else(|e| BenchRow::failed(id, label, &e));
            rows.push(row);
        }
    }
    out
}

fn aggregate(labels: &[String], wm: &[BenchRow], orig: &[BenchRow]) -> Vec<AttackAggregate> {
    let mut aggs: Vec<AttackAggregate> = labels
        .iter()
        .map(|label| {
            let ok = |rows: &[BenchRow]| -> Vec<BenchRow> {
                rows.iter()
                    .filter(|r| &r.attack == label && r.error.is_none())
                    .cloned()
                    .collect()
            };
            let (pos, neg) = (ok(wm), ok(orig));
            let failures = wm
                .iter()
                .chain(orig)
                .filter(|r| &r.attack == label && r.error.is_some())
                .count();
            let outcome = |rows: &[BenchRow]| rows.iter().map(|r| (r.score, r.decision)).collect::<Vec<_>>();
            let finite_mean = |vals: Vec<f64>| {
                let v: Vec<f64> = vals.into_iter().filter(|x| !x.is_nan()).collect();
                if v.is_empty() {
                    f64::NAN
                } else if v.iter().any(|x| x.is_infinite()) && v.iter().all(|x| x.is_infinite()) {
                    f64::INFINITY
                } else {
                    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                    f.iter().sum::<f64>() / f.len() as f64
                }
            };
            AttackAggregate {
                attack: label.clone(),
                stats: DetectionStats::from_outcomes(&outcome(&pos), &outcome(&neg)),
                failures,
                mean_psnr_db: finite_mean(pos.iter().map(|r| r.psnr_db).collect()),
                mean_ssim: finite_mean(pos.iter().map(|r| r.ssim).collect()),
                combined_quality: None,
                out_of_scope: false,
            }
        })
        .collect();
    let attacked: Vec<usize> = (0..aggs.len()).filter(|&i| aggs[i].attack != CLEAN).collect();
    let table: Vec<Vec<f64>> = attacked
        .iter()
        .map(|&i| vec![aggs[i].mean_psnr_db, aggs[i].mean_ssim])
        .collect();
    let usable = table.iter().all(|r| r.iter().all(|v| !v.is_nan()));
    if usable && !table.is_empty() {
        let q = combined_quality(&table, &[Orientation::HigherBetter, Orientation::HigherBetter]);
        let flags = out_of_scope(&q);
        for (k, &i) in attacked.iter().enumerate() {
            aggs[i].combined_quality = Some(q[k]);
            aggs[i].out_of_scope = flags[k];
        }
    }
    aggs
}

/// Runs the benchmark in memory.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.params.validate()?;
    cfg.crop_search.validate()?;
    let attacks = cfg.parsed_attacks()?;
    let keyset = cfg.keyset()?;
    let corpus = load_corpus(&cfg.input)?;
    if corpus.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "corpus has {} images, need at least 2",
            corpus.len()
        )));
    }
    let table = PartitionTable::new(&keyset, &cfg.params);
    let det = Detector {
        params: &cfg.params,
        keyset: &keyset,
        tau: cfg.tau,
        crop: &cfg.crop_search,
        rotate_fallback: cfg.rotate_fallback,
    };
    let work = || -> Vec<ImageRows> {
        corpus
            .par_iter()
            .map(|(id, img)| process_image(id, img, cfg, &attacks, &table, &det))
            .collect()
    };
    let per_image = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidParams(e.to_string()))?
            .install(work)
    } else {
        work()
    };

    let labels: Vec<String> = std::iter::once(CLEAN.to_string())
        .chain(attacks.iter().map(|a| a.to_string()))
        .collect();
    let order = |r: &BenchRow| labels.iter().position(|l| l == &r.attack).unwrap_or(usize::MAX);
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut rows_original: Vec<BenchRow> = Vec::new();
    for ir in per_image {
        rows.extend(ir.watermarked);
        rows_original.extend(ir.original);
    }
    for rs in [&mut rows, &mut rows_original] {
        rs.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(order(a).cmp(&order(b))));
    }
    let aggregates = aggregate(&labels, &rows, &rows_original);
    Ok(BenchReport {
        config_hash: cfg.hash(),
        tau: cfg.tau,
        alpha: cfg.params.alpha,
        images: corpus.len(),
        rows,
        rows_original,
        aggregates,
        quality_normalisation: "min-max per metric across the attacks of this report".into(),
        lpips: "n/a".into(),
    })
}

pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

/// Writes `rows.csv`, `rows_original.csv`, `report.json` and one
/// `roc_<attack>.csv` per attack into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &BenchReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_rows_csv(dir.join("rows.csv"), &report.rows)?;
    write_rows_csv(dir.join("rows_original.csv"), &report.rows_original)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    for agg in &report.aggregates {
        let scores = |rows: &[BenchRow]| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.attack == agg.attack && r.error.is_none())
                .map(|r| r.score)
                .collect()
        };
        let mut w = csv::Writer::from_path(dir.join(format!("roc_{}.csv", sanitize_label(&agg.attack))))?;
        w.write_record(["threshold", "fpr", "tpr"])?;
        for (t, f, p) in roc_points(&scores(&report.rows), &scores(&report.rows_original)) {
            w.write_record([fmt_float(t), fmt_float(f), fmt_float(p)])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Smallest threshold among 0 and the negative scores whose false-positive
/// rate (decision `score > tau`) is at most `target_fpr`.
pub fn calibrate_tau(neg_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if neg_scores.is_empty() {
        return Err(Error::Calibration("no negative scores".into()));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::Calibration(format!("target FPR {target_fpr} is outside [0, 1]")));
    }
    let mut candidates: Vec<f64> = std::iter::once(0.0).chain(neg_scores.iter().copied()).collect();
    candidates.sort_by(f64::total_cmp);
    let n = neg_scores.len() as f64;
    candidates
        .into_iter()
        .find(|&t| neg_scores.iter().filter(|&&s| s > t).count() as f64 / n <= target_fpr)
        .ok_or_else(|| Error::Calibration("no threshold reaches the target".into()))
}

/// `(tau, fpr, wdr)` for each threshold.
pub fn fpr_wdr_table(pos: &[f64], neg: &[f64], taus: &[f64]) -> Vec<(f64, f64, f64)> {
    let rate = |xs: &[f64], t: f64| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().filter(|&&s| s > t).count() as f64 / xs.len() as f64
        }
    };
    taus.iter().map(|&t| (t, rate(neg, t), rate(pos, t))).collect()
}

/// Clean scores of watermarked and original images, for threshold
/// calibration.
pub fn clean_scores(cfg: &BenchConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let clean_only = BenchConfig {
        attacks: Vec::new(),
        timing: false,
        ..cfg.clone()
    };
    let report = run_bench(&clean_only)?;
    let ok = |rows: &[BenchRow]| rows.iter().filter(|r| r.error.is_none()).map(|r| r.score).collect();
    Ok((ok(&report.rows), ok(&report.rows_original)))
}
