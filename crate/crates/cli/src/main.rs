//! `tbcnet`: synthesise data, train the SCM then the TEM, detect, evaluate
//! and print the storage/compute budget.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tbc::detect::{connected_components, detect_scores, write_jsonl, Mask, DEFAULT_K};
use tbc::eval::{
    max_mean, max_median, metric_row, quantile_thresholds, roc, roc_adaptive, score_frame, tophat, write_metrics_csv,
    write_roc_csv, GroundTruth, Score, DEFAULT_LAMBDA, DEFAULT_RADIUS,
};
use tbc::scm::FrozenScm;
use tbc::synth::{
    default_templates, load_dataset, load_pgm_dir, make_dataset, write_dataset, BackgroundSource, DatasetEntry,
    SynthConfig,
};
use tbc::tem::{budget, extract, NetConfig};
use tbc::train::{scm_accuracy, train_scm, train_tem, write_sidecar, RunOptions, Sidecar, TrainConfig};
use tbc::weights::{load_scm, load_tem, save_scm, save_tem};
use tbc::{Error, GrayImage, PgmDepth, ScoreMap};

#[derive(Parser)]
#[command(name = "tbcnet", version, about = "Infrared small-target extraction toolkit")]
struct Cli {
    /// Worker threads (falls back to TBC_WORKERS, then all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the closed-form storage and compute budget.
    Budget(BudgetArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the semantic constraint module on target images.
    TrainScm(TrainScmArgs),
    /// Train the target extraction module against a frozen SCM.
    TrainTem(TrainTemArgs),
    /// Extract targets and write score maps, masks and detections.
    Detect(DetectArgs),
    /// Score detect outputs against a dataset's ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    bc: Option<usize>,
    #[arg(long = "l")]
    levels: Option<usize>,
    #[arg(long, default_value_t = 256)]
    h: usize,
    #[arg(long, default_value_t = 256)]
    w: usize,
    /// Check every configuration of the published table.
    #[arg(long)]
    table2: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Tuples per class, comma separated (class = number of targets).
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of PGM backgrounds.
    #[arg(long, conflicts_with = "builtin_backgrounds")]
    backgrounds: Option<PathBuf>,
    /// Use procedurally generated clutter instead of --backgrounds.
    #[arg(long)]
    builtin_backgrounds: bool,
    /// Directory of PGM target templates (default: Gaussian blobs).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Side length of built-in backgrounds.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output weight file (`.tbcw`); a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, requires = "checkpoint_dir")]
    resume: bool,
    /// Where to dump the offending batch if training diverges.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainScmArgs {
    #[command(flatten)]
    t: TrainFlags,
    /// Held-out dataset for the accuracy log.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTemArgs {
    #[command(flatten)]
    t: TrainFlags,
    /// Weights from `train-scm`.
    #[arg(long)]
    scm: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    bc: Option<usize>,
    #[arg(long = "l")]
    levels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Tophat,
    MaxMean,
    MaxMedian,
}

#[derive(Args)]
struct DetectArgs {
    /// TEM weights.
    #[arg(long, required_unless_present = "baseline")]
    model: Option<PathBuf>,
    /// Score frames with a classical filter instead of a TEM.
    #[arg(long, conflicts_with = "model")]
    baseline: Option<Baseline>,
    /// A PGM file, a directory of PGMs, or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: usize,
    #[arg(long, default_value_t = 200)]
    thresholds: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

/// Failure with its exit status: 1 usage, 2 data, 3 numerical.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numerical(_) | Error::NonFinite(_) => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(f) = setup_workers(cli.workers).and_then(|_| run(cli.cmd)) {
        eprintln!("error: {}", f.msg);
        return ExitCode::from(f.code);
    }
    ExitCode::SUCCESS
}

fn setup_workers(flag: Option<usize>) -> Outcome {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TBC_WORKERS") {
            Ok(v) => Some(v.parse().map_err(|_| usage(format!("TBC_WORKERS must be a positive integer, got {v:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("worker count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Budget(a) => cmd_budget(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::TrainScm(a) => cmd_train_scm(a),
        Cmd::TrainTem(a) => cmd_train_tem(a),
        Cmd::Detect(a) => cmd_detect(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

/// BC, L, M_m, M_p, M_TBC, OPs as printed (H = W = 256, units of 2^20).
const PUBLISHED_BUDGETS: [(usize, usize, f64, f64, f64, f64); 8] = [
    (8, 3, 1.750, 0.046, 1.796, 54.0),
    (8, 4, 1.938, 0.187, 2.124, 72.0),
    (8, 5, 2.031, 0.749, 2.781, 90.0),
    (8, 6, 2.078, 2.999, 5.078, 108.0),
    (16, 3, 3.375, 0.185, 3.560, 216.0),
    (16, 4, 3.750, 0.747, 4.497, 288.0),
    (16, 5, 3.938, 2.997, 6.935, 360.0),
    (16, 6, 4.031, 11.997, 16.029, 432.0),
];

/// Within half a unit of the last printed decimal.
fn matches_printed(value: f64, printed: f64, decimals: i32) -> bool {
    (value - printed).abs() <= 0.5 * 10f64.powi(-decimals) + 1e-9
}

fn cmd_budget(a: BudgetArgs) -> Outcome {
    if a.table2 {
        println!("BC  L  M_m      M_p      M_TBC    OPs    match");
        let mut passed = 0;
        for (bc, l, mm, mp, mt, ops) in PUBLISHED_BUDGETS {
            let b = budget(&NetConfig::new(bc, l, 256, 256)?).in_mebi();
            let ok = matches_printed(b.m_m, mm, 3)
                && matches_printed(b.m_p, mp, 3)
                && matches_printed(b.m_total, mt, 3)
                && matches_printed(b.ops, ops, 0);
            passed += ok as usize;
            println!(
                "{bc:<3} {l:<2} {:<8.3} {:<8.3} {:<8.3} {:<6.0} {}",
                b.m_m,
                b.m_p,
                b.m_total,
                b.ops,
                if ok { "PASS" } else { "FAIL" }
            );
        }
        println!("{passed}/{} PASS", PUBLISHED_BUDGETS.len());
        return if passed == PUBLISHED_BUDGETS.len() {
            Ok(())
        } else {
            Err(Failure { code: 3, msg: "budget does not reproduce the table".into() })
        };
    }
    let (bc, l) = match (a.bc, a.levels) {
        (Some(bc), Some(l)) => (bc, l),
        _ => return Err(usage("budget needs --bc and --l (or --table2)")),
    };
    let raw = budget(&NetConfig::new(bc, l, a.h, a.w)?);
    let m = raw.in_mebi();
    println!("quantity  raw            x2^20");
    println!("OPs       {:<14} {:.3}", raw.ops, m.ops);
    println!("M_m       {:<14} {:.3}", raw.m_m, m.m_m);
    println!("M_p       {:<14} {:.3}", raw.m_p, m.m_p);
    println!("M_TBC     {:<14} {:.3}", raw.m_total, m.m_total);
    Ok(())
}

fn require_seed(seed: Option<u64>, what: &str) -> Result<u64, Failure> {
    seed.ok_or_else(|| usage(format!("{what} requires an explicit --seed so results are reproducible")))
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    let seed = require_seed(a.seed, "synth")?;
    let cfg = SynthConfig {
        classes: a.counts.len(),
        ..SynthConfig::default()
    };
    let source = match (&a.backgrounds, a.builtin_backgrounds) {
        (Some(dir), _) => {
            let imgs = load_pgm_dir(dir)?;
            if imgs.is_empty() {
                return Err(Failure { code: 2, msg: format!("no PGM backgrounds in {}", dir.display()) });
            }
            BackgroundSource::Images(imgs)
        }
        (None, true) => BackgroundSource::Builtin { width: a.size, height: a.size },
        (None, false) => return Err(usage("pass --backgrounds DIR or --builtin-backgrounds")),
    };
    let templates = match &a.templates {
        Some(dir) => load_pgm_dir(dir)?,
        None => default_templates(),
    };
    let data = make_dataset(&source, &templates, &a.counts, &cfg, seed)?;
    write_dataset(&a.out, &data)?;
    log::info!(
        "wrote {} tuples to {} ({} skipped)",
        data.entries.len(),
        a.out.display(),
        data.skipped.len()
    );
    Ok(())
}

fn load_config(t: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut seed = t.seed;
    let mut cfg = TrainConfig::default();
    if let Some(path) = &t.config {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if seed.is_none() {
            seed = value.get("seed").and_then(|s| s.as_u64());
        }
        cfg = serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    cfg.seed = require_seed(seed, "training")?;
    if let Some(e) = t.epochs {
        cfg = cfg.with_epochs(e);
    }
    if let Some(b) = t.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = t.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_options(t: &TrainFlags) -> RunOptions {
    RunOptions {
        checkpoint_dir: t.checkpoint_dir.clone(),
        resume: t.resume,
        dump_dir: t.dump_dir.clone(),
    }
}

fn dataset(path: &Path) -> Result<Vec<DatasetEntry>, Failure> {
    if !path.exists() {
        return Err(Failure { code: 2, msg: format!("dataset {} does not exist (run `tbcnet synth` first)", path.display()) });
    }
    Ok(load_dataset(path)?)
}

fn finish_sidecar(out: &Path, model: &str, cfg: &TrainConfig, log: tbc::train::TrainLog, entries: &[DatasetEntry]) -> Outcome {
    let f = &entries[0].tuple.f_d;
    let side = Sidecar {
        model: model.into(),
        config: cfg.clone(),
        epoch: cfg.epochs - 1,
        log,
        height: f.height(),
        width: f.width(),
    };
    write_sidecar(out, &side)?;
    Ok(())
}

fn cmd_train_scm(a: TrainScmArgs) -> Outcome {
    let cfg = load_config(&a.t)?;
    let train = dataset(&a.t.data)?;
    let val = match &a.val {
        Some(p) => dataset(p)?,
        None => Vec::new(),
    };
    let (net, log) = train_scm(&train, &val, &cfg, &run_options(&a.t))?;
    save_scm(&net, &a.t.out)?;
    if !val.is_empty() {
        log::info!("held-out accuracy {:.4}", scm_accuracy(&net, &val)?);
    }
    finish_sidecar(&a.t.out, "scm", &cfg, log, &train)
}

fn cmd_train_tem(a: TrainTemArgs) -> Outcome {
    let scm_path = a.scm.as_ref().ok_or_else(|| usage("SCM checkpoint required (stage 1: run `tbcnet train-scm` first)"))?;
    if !scm_path.exists() {
        return Err(usage(format!(
            "SCM checkpoint required (stage 1): {} not found, run `tbcnet train-scm` first",
            scm_path.display()
        )));
    }
    let mut cfg = load_config(&a.t)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(bc) = a.bc {
        cfg.bc = bc;
    }
    if let Some(l) = a.levels {
        cfg.levels = l;
    }
    cfg.validate()?;
    let train = dataset(&a.t.data)?;
    let scm = FrozenScm::new(load_scm(scm_path)?);
    let (net, log) = train_tem(&train, &scm, &cfg, &run_options(&a.t))?;
    save_tem(&net, &a.t.out)?;
    finish_sidecar(&a.t.out, "tem", &cfg, log, &train)
}

/// `(name, image)` for every frame named by `input`.
fn frames(input: &Path) -> Result<Vec<(String, GrayImage)>, Failure> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_file() {
        return Ok(vec![(name(input), GrayImage::read_pgm(input)?)]);
    }
    if input.join(tbc::synth::MANIFEST).exists() {
        let recs = tbc::synth::read_manifest(&input.join(tbc::synth::MANIFEST))?;
        return recs
            .into_iter()
            .map(|r| Ok((r.f_d.clone(), GrayImage::read_pgm(input.join(&r.f_d))?)))
            .collect();
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure { code: 2, msg: format!("no PGM frames in {}", input.display()) });
    }
    paths.iter().map(|p| Ok((name(p), GrayImage::read_pgm(p)?))).collect()
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

fn baseline_scores(b: Baseline, img: &GrayImage) -> tbc::Result<ScoreMap> {
    let s = img.to_score_map();
    match b {
        Baseline::Tophat => tophat(&s, 5),
        Baseline::MaxMean => max_mean(&s, 15),
        Baseline::MaxMedian => max_median(&s, 15),
    }
}

fn cmd_detect(a: DetectArgs) -> Outcome {
    let net = match &a.model {
        Some(p) => Some(load_tem(p)?),
        None => None,
    };
    let frames = frames(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let mut jsonl = BufWriter::new(fs::File::create(a.out.join("detections.jsonl"))?);
    for (name, img) in &frames {
        let scores = match (&net, a.baseline) {
            (Some(n), _) => extract(n, img)?,
            (None, Some(b)) => baseline_scores(b, img)?,
            (None, None) => unreachable!("clap requires --model or --baseline"),
        };
        let fd = detect_scores(scores, a.k)?;
        fd.normalized.write_pgm(a.out.join(format!("{}_target.pgm", stem(name))), PgmDepth::Sixteen)?;
        fd.mask.to_image().write_pgm(a.out.join(format!("{}_mask.pgm", stem(name))), PgmDepth::Eight)?;
        write_jsonl(&mut jsonl, name, &fd.detections)?;
    }
    log::info!("processed {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let entries = dataset(&a.data)?;
    let recs = tbc::synth::read_manifest(&a.data.join(tbc::synth::MANIFEST))?;
    let mut maps = Vec::new();
    let mut normalized = Vec::new();
    let mut gts = Vec::new();
    let mut at_k = Score::default();
    let mut rows = Vec::new();
    for (rec, e) in recs.iter().zip(&entries) {
        let s = stem(&rec.f_d);
        let target_path = a.detections.join(format!("{s}_target.pgm"));
        if !target_path.exists() {
            return Err(Failure {
                code: 2,
                msg: format!("{} missing (run `tbcnet detect` on this dataset first)", target_path.display()),
            });
        }
        let target = GrayImage::read_pgm(&target_path)?;
        let mask = GrayImage::read_pgm(a.detections.join(format!("{s}_mask.pgm")))?;
        let (w, h) = (target.width(), target.height());
        let gt = GroundTruth::new(e.tuple.boxes.clone(), w, h)?;
        let mask = Mask::new(w, h, mask.pixels().iter().map(|&v| v > 0.5).collect())?;
        at_k.add(&score_frame(&connected_components(&mask), &gt, a.radius, w, h));
        for (i, b) in gt.boxes.iter().enumerate() {
            match metric_row(&rec.f_d, i, &e.tuple.f_d.to_score_map(), &target.to_score_map(), b, a.lambda) {
                Ok(r) => rows.push(r),
                Err(err) => log::warn!("{} target {i}: {err}", rec.f_d),
            }
        }
        maps.push(target.to_score_map());
        normalized.push(target);
        gts.push(gt);
    }
    fs::create_dir_all(&a.out)?;
    let curve = roc(&maps, &gts, &quantile_thresholds(&maps, a.thresholds), a.radius)?;
    write_roc_csv(BufWriter::new(fs::File::create(a.out.join("roc.csv"))?), &curve)?;
    let ks: Vec<f64> = (1..=300).map(|i| i as f64 * 0.1).collect();
    let k_curve = roc_adaptive(&normalized, &gts, &ks, a.radius)?;
    write_roc_csv(BufWriter::new(fs::File::create(a.out.join("roc_k.csv"))?), &k_curve)?;
    write_metrics_csv(BufWriter::new(fs::File::create(a.out.join("metrics.csv"))?), &rows)?;
    let summary = serde_json::json!({
        "frames": normalized.len(),
        "targets": at_k.targets,
        "detected": at_k.true_detections,
        "false_pixels": at_k.false_pixels,
        "pd": at_k.pd(),
        "fa": at_k.fa(),
        "best_at_fa_1e-3": k_curve.best_at(1e-3),
    });
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(Error::from)?)?;
    println!("Pd {:.4}  Fa {:.3e}  ({} of {} targets)", at_k.pd(), at_k.fa(), at_k.true_detections, at_k.targets);
    Ok(())
}
