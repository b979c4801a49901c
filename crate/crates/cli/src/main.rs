use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use blockmark::attacks::{derive_seed, AttackSpec};
use blockmark::bench::{
    calibrate_tau, clean_scores, fpr_wdr_table, is_image_path, run_bench, write_report, BenchConfig, CorpusSource,
};
use blockmark::detect::{render_overlay, Cell};
use blockmark::keying::build_keyset;
use blockmark::synth::synth_corpus;
use blockmark::*;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

const DEFAULT_TAU: f64 = 0.37;

#[derive(Parser)]
#[command(name = "blockmark", version, about = "Blind block-based DWT image watermarking")]
struct Cli {
    /// Secret key as hex (at least 16 bytes).
    #[arg(long, global = true, conflicts_with = "key_file")]
    key_hex: Option<String>,
    /// File holding the secret key as hex.
    #[arg(long, global = true)]
    key_file: Option<PathBuf>,
    /// Scheme parameters as inline JSON or a path to a JSON file. A "tau" entry
    /// sets the image-level threshold.
    #[arg(long, global = true)]
    params: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed for randomised attacks.
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Watermark images and write them as PNG with a JSON report each.
    Embed(EmbedArgs),
    /// Detect a watermark; exit code 0 = watermarked, 1 = not, 2 = error.
    Detect(DetectArgs),
    /// Apply a chain of manipulations, left to right.
    Attack(AttackArgs),
    /// Run the corpus benchmark and write CSV/JSON reports.
    Bench(BenchArgs),
    /// Choose the image-level threshold from clean scores.
    CalibrateTau(CalibrateArgs),
    /// Write the detection map as a tinted overlay.
    Map(MapArgs),
    /// Write the synthetic test corpus as PNG files.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct EmbedArgs {
    /// Image files or directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short)]
    out_dir: PathBuf,
    /// Embed only in high-entropy blocks.
    #[arg(long)]
    entropy_adaptive: bool,
    #[arg(long, value_enum, default_value_t = OutFormat::Png)]
    format: OutFormat,
    /// Permit lossy output formats, which can destroy the watermark.
    #[arg(long)]
    allow_lossy: bool,
    #[arg(long, default_value_t = 95)]
    jpeg_quality: u8,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Png,
    Jpeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    MaxScore,
    FixedThreshold,
    ProportionTest,
}

#[derive(Args)]
struct SearchArgs {
    /// Image-level threshold; overrides "tau" in --params.
    #[arg(long)]
    tau: Option<f64>,
    /// Search all block-grid offsets (for cropped images).
    #[arg(long)]
    crop_search: bool,
    #[arg(long, value_enum, default_value_t = Strategy::FixedThreshold)]
    strategy: Strategy,
    /// Stopping score for the fixed-threshold strategy.
    #[arg(long, default_value_t = 0.8)]
    stop_p: f64,
    /// Significance of the proportion-test strategy.
    #[arg(long, default_value_t = 0.05)]
    significance: f64,
    #[arg(long, default_value_t = 1)]
    offset_stride: usize,
}

#[derive(Args)]
struct DetectArgs {
    input: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Also write the overlay PNG here.
    #[arg(long)]
    map_out: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Draw 1-px block grid lines.
    #[arg(long)]
    grid: bool,
    /// Show the map before neighbourhood smoothing.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct AttackArgs {
    input: PathBuf,
    /// Manipulation such as jpeg:50, blur:5,1.0, noise:0.05, brightness:0.5,
    /// contrast:0.5, rotate90, crop:0.7, seed:nearest. Repeatable.
    #[arg(long = "op", required = true)]
    ops: Vec<String>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    allow_lossy: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use every image in this directory as the corpus.
    #[arg(long, conflicts_with = "synthetic")]
    input_dir: Option<PathBuf>,
    /// Use this many synthetic images as the corpus.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, short)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Record zero runtimes so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long, default_value_t = 0.05)]
    target_fpr: f64,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, short)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

struct Settings {
    params: WatermarkParams,
    tau: Option<f64>,
    params_given: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let ctx = load_params(cli.params.as_deref())?;
    let key = || load_key(cli.key_hex.as_deref(), cli.key_file.as_deref());
    match &cli.command {
        Command::Embed(a) => embed(a, ctx, key()?),
        Command::Detect(a) => detect(a, &ctx, &key()?),
        Command::Map(a) => map(a, &ctx, &key()?),
        Command::Attack(a) => attack(a, &ctx.params, cli.rng_seed.unwrap_or(0)),
        Command::Bench(a) => {
            let cfg = bench_config(a, &ctx, &cli)?;
            let report = run_bench(&cfg)?;
            write_report(&cfg.output_dir, &report)?;
            let aggregates: Vec<Value> = report
                .aggregates
                .iter()
                .map(|g| {
                    json!({
                        "attack": g.attack,
                        "wdr": g.stats.wdr,
                        "fpr": g.stats.fpr,
                        "auc": g.stats.auc,
                        "n_pos": g.stats.n_pos,
                        "n_neg": g.stats.n_neg,
                        "failures": g.failures,
                        "mean_psnr_db": g.mean_psnr_db,
                        "mean_ssim": g.mean_ssim,
                    })
                })
                .collect();
            print_json(&json!({
                "config_hash": report.config_hash,
                "images": report.images,
                "output_dir": cfg.output_dir,
                "aggregates": aggregates,
            }));
            Ok(0)
        }
        Command::CalibrateTau(a) => {
            let cfg = bench_config(&a.bench, &ctx, &cli)?;
            let (pos, neg) = clean_scores(&cfg)?;
            let tau = calibrate_tau(&neg, a.target_fpr)?;
            let mut taus: Vec<f64> = (1..20).map(|i| f64::from(i) * 0.05).collect();
            taus.push(tau);
            taus.sort_by(f64::total_cmp);
            taus.dedup();
            let table: Vec<Value> = fpr_wdr_table(&pos, &neg, &taus)
                .into_iter()
                .map(|(t, fpr, wdr)| json!({"tau": t, "fpr": fpr, "wdr": wdr}))
                .collect();
            print_json(&json!({"tau": tau, "target_fpr": a.target_fpr, "table": table}));
            Ok(0)
        }
        Command::GenCorpus(a) => {
            std::fs::create_dir_all(&a.out_dir)?;
            for (id, img) in synth_corpus(a.seed, a.count) {
                img.save_png(a.out_dir.join(format!("{id}.png")))?;
            }
            Ok(0)
        }
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialise"));
}

fn load_params(arg: Option<&str>) -> Result<Settings> {
    let Some(arg) = arg else {
        return Ok(Settings {
            params: WatermarkParams::default(),
            tau: None,
            params_given: false,
        });
    };
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading params file {arg}"))?
    };
    let mut value: Value = serde_json::from_str(&text).context("parsing params JSON")?;
    let tau = match value.as_object_mut().and_then(|o| o.remove("tau")) {
        Some(t) => Some(t.as_f64().context("tau must be a number")?),
        None => None,
    };
    let params: WatermarkParams = serde_json::from_value(value).context("parsing params JSON")?;
    params.validate()?;
    Ok(Settings {
        params,
        tau,
        params_given: true,
    })
}

fn load_key(hex: Option<&str>, file: Option<&Path>) -> Result<SecretKey> {
    match (hex, file) {
        (Some(h), _) => Ok(SecretKey::from_hex(h.trim())?),
        (None, Some(f)) => {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading key file {}", f.display()))?;
            Ok(SecretKey::from_hex(text.trim())?)
        }
        (None, None) => bail!("no key given; pass --key-hex or --key-file"),
    }
}

fn keyset(key: SecretKey, params: &WatermarkParams) -> Result<KeySet> {
    Ok(build_keyset(key, params.key_count)?)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image_path(f))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no input images found");
    }
    Ok(files)
}

fn is_lossy(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("jpg" | "jpeg")
    )
}

fn refuse_lossy(path: &Path, allow: bool) -> Result<()> {
    if is_lossy(path) && !allow {
        bail!(
            "{} is a lossy format; pass --allow-lossy to write it anyway",
            path.display()
        );
    }
    Ok(())
}

fn save(img: &ImageBuf, path: &Path, jpeg_quality: u8) -> Result<()> {
    if is_lossy(path) {
        img.save_jpeg(path, jpeg_quality)?;
    } else {
        img.save_png(path)?;
    }
    Ok(())
}

fn embed(a: &EmbedArgs, mut ctx: Settings, key: SecretKey) -> Result<u8> {
    if a.format == OutFormat::Jpeg && !a.allow_lossy {
        bail!("JPEG output can erase the watermark; pass --allow-lossy to write it anyway");
    }
    if a.entropy_adaptive {
        ctx.params.entropy_adaptive = true;
    }
    let keyset = keyset(key, &ctx.params)?;
    let files = expand_inputs(&a.inputs)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let ext = match a.format {
        OutFormat::Png => "png",
        OutFormat::Jpeg => "jpg",
    };
    let mut seen = std::collections::HashSet::new();
    for f in &files {
        let stem = f
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad file name {}", f.display()))?;
        if !seen.insert(stem.to_string()) {
            bail!("two inputs share the name {stem}");
        }
        let img = ImageBuf::load(f).with_context(|| format!("decoding {}", f.display()))?;
        let (wm, report) =
            embed_image(&img, &ctx.params, &keyset).with_context(|| format!("embedding {}", f.display()))?;
        let out = a.out_dir.join(format!("{stem}.{ext}"));
        save(&wm, &out, a.jpeg_quality)?;
        let report_path = a.out_dir.join(format!("{stem}.json"));
        let psnr = metrics::psnr(&img, &wm)?;
        let body = json!({
            "input": f,
            "output": out,
            "params": ctx.params,
            "psnr_db": if psnr.is_finite() { json!(psnr) } else { json!("inf") },
            "report": report,
        });
        std::fs::write(&report_path, serde_json::to_string_pretty(&body)?)?;
        println!("{}", out.display());
    }
    Ok(0)
}

fn search_config(s: &SearchArgs) -> Result<CropSearchConfig> {
    let cfg = CropSearchConfig {
        strategy: match s.strategy {
            Strategy::MaxScore => CropStrategy::MaxScore,
            Strategy::FixedThreshold => CropStrategy::FixedThreshold,
            Strategy::ProportionTest => CropStrategy::ProportionTest,
        },
        stop_p: s.stop_p,
        significance: s.significance,
        offset_stride: s.offset_stride,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_detection(img: &ImageBuf, s: &SearchArgs, ctx: &Settings, keyset: &KeySet) -> Result<DetectionResult> {
    let tau = s.tau.or(ctx.tau).unwrap_or(DEFAULT_TAU);
    Ok(if s.crop_search {
        crop_search(img, &ctx.params, keyset, tau, &search_config(s)?)?
    } else {
        detect_image(img, &ctx.params, keyset, tau)?
    })
}

fn summary(res: &DetectionResult) -> Value {
    json!({
        "score": res.score,
        "decision": res.decision,
        "tau": res.tau,
        "alpha": res.alpha,
        "offsets_tested": res.offsets_tested,
        "crop_offset": res.crop_offset,
        "block_threshold": res.block_threshold,
        "blocks": {
            "green": res.raw_map.count(Cell::Green),
            "red": res.raw_map.count(Cell::Red),
            "skipped": res.raw_map.count(Cell::Skipped),
        },
    })
}

fn detect(a: &DetectArgs, ctx: &Settings, key: &SecretKey) -> Result<u8> {
    let keyset = keyset(key.clone(), &ctx.params)?;
    let img = ImageBuf::load(&a.input).with_context(|| format!("decoding {}", a.input.display()))?;
    let res = run_detection(&img, &a.search, ctx, &keyset)?;
    if let Some(path) = &a.map_out {
        render_overlay(&img, &res.map, false).save(path)?;
    }
    print_json(&summary(&res));
    Ok(if res.decision { 0 } else { 1 })
}

fn map(a: &MapArgs, ctx: &Settings, key: &SecretKey) -> Result<u8> {
    refuse_lossy(&a.out, false)?;
    let keyset = keyset(key.clone(), &ctx.params)?;
    let img = ImageBuf::load(&a.input).with_context(|| format!("decoding {}", a.input.display()))?;
    let res = run_detection(&img, &a.search, ctx, &keyset)?;
    let shown = if a.raw { &res.raw_map } else { &res.map };
    render_overlay(&img, shown, a.grid).save(&a.out)?;
    print_json(&summary(&res));
    Ok(0)
}

const OPS_HELP: &str = "known ops: jpeg:Q, blur:K,SIGMA, noise:SIGMA, brightness:F, contrast:F, rotate90[:TURNS], \
                        crop:KEEP_FRACTION, seed:higher|lower|nearest";

fn attack(a: &AttackArgs, params: &WatermarkParams, master: u64) -> Result<u8> {
    refuse_lossy(&a.out, a.allow_lossy)?;
    let specs: Vec<AttackSpec> = a
        .ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            op.parse::<AttackSpec>()
                .map(|s| s.with_seed(derive_seed(master, &format!("{i}/{op}"))))
                .with_context(|| format!("bad --op {op:?}\n{OPS_HELP}"))
        })
        .collect::<Result<_>>()?;
    let mut img = ImageBuf::load(&a.input).with_context(|| format!("decoding {}", a.input.display()))?;
    let mut applied = Vec::new();
    for spec in &specs {
        let out = spec.apply(&img, params)?;
        applied.push(json!({
            "op": spec.to_string(),
            "rng_seed": spec.rng_seed,
            "crop_offset": out.crop_offset,
        }));
        img = out.image;
    }
    save(&img, &a.out, 95)?;
    print_json(&json!({"output": a.out, "ops": applied}));
    Ok(0)
}

fn bench_config(a: &BenchArgs, ctx: &Settings, cli: &Cli) -> Result<BenchConfig> {
    let mut cfg = match &a.config {
        Some(p) => BenchConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => BenchConfig::default(),
    };
    if let Some(dir) = &a.input_dir {
        cfg.input = CorpusSource::Dir { path: dir.clone() };
    }
    if let Some(count) = a.synthetic {
        let seed = match cfg.input {
            CorpusSource::Synthetic { seed, .. } => seed,
            CorpusSource::Dir { .. } => 1,
        };
        cfg.input = CorpusSource::Synthetic { seed, count };
    }
    if ctx.params_given {
        cfg.params = ctx.params.clone();
    }
    if let Some(t) = a.tau.or(ctx.tau) {
        cfg.tau = t;
    }
    if let Some(dir) = &a.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.rng_seed {
        cfg.rng_seed = s;
    }
    if a.no_timing {
        cfg.timing = false;
    }
    if let Some(h) = &cli.key_hex {
        cfg.key_hex = Some(h.clone());
    } else if let Some(f) = &cli.key_file {
        cfg.key_hex = None;
        cfg.key_file = Some(f.clone());
    }
    Ok(cfg)
}
