//! `cascade-seg` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 training, 5 channel
//! mismatch, 6 evaluation pairing.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cascade::{log_text, train_cascade, CascadeModel};
use crate::config::RunConfig;
use crate::dataset::{self, load_cases, MASK_SUFFIX};
use crate::error::Error;
use crate::inference::{binarize_and_filter, predict_maps_chunked, roc_csv, roc_sweep, ProbabilityMap};
use crate::metrics::{self, evaluate, pearson_r};
use crate::mvol;
use crate::phantom::{generate_range, write_cohort};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_CHANNEL: i32 = 5;
pub const EXIT_EVALUATION: i32 = 6;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "CASCADE_SEG_THREADS";

/// File-name suffixes of prediction outputs.
pub const PROB_SUFFIX: &str = "prob";
pub const BINARY_SUFFIX: &str = "binary";

#[derive(Debug, Parser)]
#[command(name = "cascade-seg", version, about = "Cascaded 3D CNN white-matter lesion segmentation")]
pub struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    GenPhantom {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cases.
        #[arg(short, long, default_value_t = 20)]
        n: usize,
        /// Index of the first case.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Train the cascade and choose its test parameters.
    Train {
        /// Directory of training cases with masks.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output model directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write probability maps and filtered binary masks.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of cases to segment.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write probability maps (both kinds are written when neither flag is given).
        #[arg(long)]
        prob: bool,
        /// Write binary masks.
        #[arg(long)]
        binary: bool,
    },
    /// Compare predicted masks with ground truth.
    Evaluate {
        /// Directory of `<id>_binary.mvol` predictions.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory of `<id>_mask.mvol` ground truth.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write a ROC sweep per case from `<id>_prob.mvol`.
        #[arg(long)]
        roc: bool,
    },
    /// List the configuration keys.
    Keys,
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

/// Exit code for `e`; errors without a fixed class get `fallback`.
pub fn exit_code(e: &Error, fallback: i32) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::Io { .. }
        | Error::MissingFile(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::BadHeader(_)
        | Error::UnexpectedDtype { .. }
        | Error::DimensionOverflow(_)
        | Error::TruncatedPayload { .. }
        | Error::TrailingData(_)
        | Error::InvalidVoxelSize(_)
        | Error::InvalidMaskValue { .. }
        | Error::BadCheckpoint(_) => EXIT_IO,
        Error::ChannelMismatch { .. } | Error::MissingFlairChannel(_) => EXIT_CHANNEL,
        _ => fallback,
    }
}

fn fail(fallback: i32) -> impl Fn(Error) -> Failure {
    move |e| Failure::new(exit_code(&e, fallback), e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> std::result::Result<PathBuf, Failure> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("no {what} given (flag or config key)")))
}

fn make_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("cannot create {}: {e}", dir.display())))?;
    // an existing read-only directory is caught here rather than mid-run
    let probe = dir.join(".cascade-seg-write-test");
    fs::write(&probe, b"").map_err(|e| Failure::new(EXIT_IO, format!("cannot write to {}: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::new(EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_gen_phantom(cfg: &RunConfig, out: &Path, n: usize, start: usize) -> Outcome {
    make_dir(out)?;
    let cases = generate_range(&cfg.phantom, start, n).map_err(fail(EXIT_CONFIG))?;
    write_cohort(&cases, out).map_err(fail(EXIT_IO))?;
    println!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, model_dir: &Path) -> Outcome {
    make_dir(model_dir)?;
    let cases = load_cases(data, cfg.channels.as_deref()).map_err(fail(EXIT_IO))?;
    if cases.is_empty() {
        return Err(Failure::new(EXIT_IO, format!("no cases found in {}", data.display())));
    }
    let out = train_cascade(&cases, &cfg.train).map_err(fail(EXIT_TRAINING))?;
    out.model.save(model_dir).map_err(fail(EXIT_IO))?;
    write_text(&model_dir.join("cnn1_train.log"), &log_text(&out.cnn1.log))?;
    write_text(&model_dir.join("cnn2_train.log"), &log_text(&out.cnn2.log))?;
    println!(
        "first network: best epoch {} of {}, validation loss {:.6}",
        out.cnn1.best().epoch,
        out.cnn1.log.len(),
        out.cnn1.best().val_loss
    );
    println!(
        "second network: best epoch {} of {}, validation loss {:.6}",
        out.cnn2.best().epoch,
        out.cnn2.log.len(),
        out.cnn2.best().val_loss
    );
    println!("t_bin = {}, l_min = {}", out.model.t_bin, out.model.l_min);
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, model_dir: &Path, case_dir: &Path, out: &Path, prob: bool, binary: bool) -> Outcome {
    let (prob, binary) = if prob || binary { (prob, binary) } else { (true, true) };
    let model = CascadeModel::load(model_dir).map_err(fail(EXIT_IO))?;
    make_dir(out)?;
    let cases = load_cases(case_dir, Some(&model.channel_order)).map_err(fail(EXIT_IO))?;
    for case in &cases {
        let normalized = case.normalized().map_err(fail(EXIT_IO))?;
        let maps = predict_maps_chunked(&model, &normalized, cfg.chunk_planes).map_err(fail(EXIT_CHANNEL))?;
        if prob {
            let path = out.join(format!("{}_{PROB_SUFFIX}.mvol", case.case_id));
            mvol::save_volume(&path, &maps.cascade.to_volume()).map_err(fail(EXIT_IO))?;
        }
        if binary {
            let seg = binarize_and_filter(&maps.cascade, model.t_bin, model.l_min);
            let path = out.join(format!("{}_{BINARY_SUFFIX}.mvol", case.case_id));
            mvol::save_mask(&path, &seg.binary).map_err(fail(EXIT_IO))?;
        }
        println!("{}: done", case.case_id);
    }
    Ok(())
}

fn ids_with(dir: &Path, suffix: &str) -> std::result::Result<BTreeSet<String>, Failure> {
    let files = dataset::scan(dir).map_err(fail(EXIT_IO))?;
    Ok(files.keys().filter(|(_, s)| s == suffix).map(|(id, _)| id.clone()).collect())
}

pub fn cmd_evaluate(cfg: &RunConfig, pred: &Path, gt: &Path, report: &Path, roc: bool) -> Outcome {
    let pred_ids = ids_with(pred, BINARY_SUFFIX)?;
    let gt_ids = ids_with(gt, MASK_SUFFIX)?;
    if pred_ids != gt_ids || pred_ids.is_empty() {
        let only_pred: Vec<_> = pred_ids.difference(&gt_ids).collect();
        let only_gt: Vec<_> = gt_ids.difference(&pred_ids).collect();
        return Err(Failure::new(
            EXIT_EVALUATION,
            format!("case ids do not pair up: only predicted {only_pred:?}, only ground truth {only_gt:?}"),
        ));
    }
    let report_dir = report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    make_dir(report_dir)?;
    let mut reports = Vec::new();
    for id in &pred_ids {
        let seg = mvol::load_mask(pred.join(format!("{id}_{BINARY_SUFFIX}.mvol"))).map_err(fail(EXIT_IO))?;
        let mask = mvol::load_mask(gt.join(format!("{id}_{MASK_SUFFIX}.mvol"))).map_err(fail(EXIT_IO))?;
        reports.push(evaluate(id, &seg, &mask, cfg.eval).map_err(fail(EXIT_EVALUATION))?);
        if roc {
            let path = pred.join(format!("{id}_{PROB_SUFFIX}.mvol"));
            let prob = mvol::load_volume(&path)
                .and_then(ProbabilityMap::from_volume)
                .map_err(fail(EXIT_IO))?;
            let points = roc_sweep(&prob, &mask, cfg.roc_l_min, &cfg.train.grid.t_bins).map_err(fail(EXIT_EVALUATION))?;
            write_text(&report_dir.join(format!("{id}_roc.csv")), &roc_csv(&points))?;
        }
    }
    write_text(report, &metrics::reports_csv(&reports))?;
    print!("{}", metrics::reports_table(&reports));
    let seg_ml: Vec<f64> = reports.iter().map(|r| r.seg_vol_ml).collect();
    let gt_ml: Vec<f64> = reports.iter().map(|r| r.gt_vol_ml).collect();
    match pearson_r(&gt_ml, &seg_ml) {
        Ok(r) => println!("lesion volume Pearson r = {r:.4}"),
        Err(e) => println!("lesion volume Pearson r unavailable: {e}"),
    }
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("{THREADS_ENV}={v} is not a positive integer")))?;
    // a pool may already exist when the library is embedded; keep it then
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(fail(EXIT_CONFIG))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides).map_err(fail(EXIT_CONFIG))?;
    match cli.command {
        Command::GenPhantom { out, n, start } => {
            let out = required(out, &cfg.out_dir, "output directory")?;
            cmd_gen_phantom(&cfg, &out, n, start)
        }
        Command::Train { data, model } => {
            let data = required(data, &cfg.data_dir, "data directory")?;
            let model = required(model, &cfg.model_dir, "model directory")?;
            cmd_train(&cfg, &data, &model)
        }
        Command::Predict { model, cases, out, prob, binary } => {
            let model = required(model, &cfg.model_dir, "model directory")?;
            let cases = required(cases, &cfg.case_dir, "case directory")?;
            let out = required(out, &cfg.out_dir, "output directory")?;
            cmd_predict(&cfg, &model, &cases, &out, prob, binary)
        }
        Command::Evaluate { pred, gt, report, roc } => {
            let pred = required(pred, &cfg.pred_dir, "prediction directory")?;
            let gt = required(gt, &cfg.gt_dir, "ground-truth directory")?;
            let report = required(report, &cfg.report, "report path")?;
            cmd_evaluate(&cfg, &pred, &gt, &report, roc)
        }
        Command::Keys => {
            print!("{}", RunConfig::describe_keys());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
