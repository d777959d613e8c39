//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown keys are
//! rejected. Ranges are written `start:stop:step` (inclusive) or as a comma
//! list. Example:
//!
//! ```text
//! # training
//! seed = 42
//! max_epochs = 400
//! early_stop_patience = 50
//! augmentation = on
//! t_bin_grid = 0.05:0.95:0.05
//! l_min_grid = 0:100:5
//! # phantoms
//! phantom_dims = 48
//! phantom_lesions = 2,6
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cascade::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::phantom::PhantomConfig;
use crate::volume::Dims;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "training seed"),
    ("patch_size", "odd patch edge length"),
    ("max_epochs", "maximum training epochs per network"),
    ("early_stop_patience", "epochs without a new validation minimum before stopping"),
    ("batch_size", "samples per mini-batch after augmentation"),
    ("validation_fraction", "share of each class held out for validation"),
    ("flair_threshold", "minimum normalized FLAIR of a candidate negative"),
    ("augmentation", "on or off"),
    ("adadelta_rho", "ADADELTA decay"),
    ("adadelta_epsilon", "ADADELTA conditioning constant"),
    ("t_bin_grid", "binarization thresholds searched"),
    ("l_min_grid", "minimum region sizes searched"),
    ("channels", "channel order used when loading cases"),
    ("chunk_planes", "z-planes evaluated at a time during prediction"),
    ("min_overlap", "minimum overlap fraction for a region detection"),
    ("region_ppv", "report region-level PPV (on or off)"),
    ("roc_l_min", "minimum region size used by ROC sweeps"),
    ("phantom_seed", "phantom seed"),
    ("phantom_dims", "phantom extent: n or nx,ny,nz"),
    ("phantom_voxel_size", "phantom voxel size in mm: s or sx,sy,sz"),
    ("phantom_channels", "phantom channel names"),
    ("phantom_lesions", "min,max lesions per case"),
    ("phantom_radius", "min,max lesion semi-axis in voxels"),
    ("phantom_contrast", "FLAIR lesion offset"),
    ("phantom_noise", "noise standard deviation"),
    ("data_dir", "training case directory"),
    ("model_dir", "model directory"),
    ("case_dir", "directory of cases to predict"),
    ("out_dir", "output directory"),
    ("pred_dir", "prediction directory to evaluate"),
    ("gt_dir", "ground-truth directory"),
    ("report", "evaluation report path"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub eval: EvalOptions,
    pub roc_l_min: usize,
    /// Channel order for loading cases; `None` uses sorted file names.
    pub channels: Option<Vec<String>>,
    pub chunk_planes: usize,
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub case_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            phantom: PhantomConfig::default(),
            eval: EvalOptions::default(),
            roc_l_min: 20,
            channels: None,
            chunk_planes: 64,
            data_dir: None,
            model_dir: None,
            case_dir: None,
            out_dir: None,
            pred_dir: None,
            gt_dir: None,
            report: None,
        }
    }
}

fn invalid(key: &str, value: &str, what: &str) -> Error {
    Error::InvalidConfig(format!("{key} = {value}: {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(key, v, "not a valid number"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, v, "expected on or off")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let xs: Vec<T> = list(key, v)?;
    match xs[..] {
        [a] => Ok([a; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(invalid(key, v, "expected one or three values")),
    }
}

fn pair<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    let xs: Vec<T> = list(key, v)?;
    match xs[..] {
        [a, b] => Ok((a, b)),
        _ => Err(invalid(key, v, "expected min,max")),
    }
}

/// `start:stop:step` (inclusive, values rounded to 1e-9) or a comma list.
fn float_grid(key: &str, v: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    match parts[..] {
        [_] => list(key, v),
        [a, b, s] => {
            let (a, b, s): (f64, f64, f64) = (num(key, a)?, num(key, b)?, num(key, s)?);
            if !(s > 0.0) || b < a {
                return Err(invalid(key, v, "range needs start <= stop and a positive step"));
            }
            let n = ((b - a) / s + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| ((a + i as f64 * s) * 1e9).round() / 1e9).collect())
        }
        _ => Err(invalid(key, v, "expected start:stop:step or a list")),
    }
}

fn int_grid(key: &str, v: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    match parts[..] {
        [_] => list(key, v),
        [a, b, s] => {
            let (a, b, s): (usize, usize, usize) = (num(key, a)?, num(key, b)?, num(key, s)?);
            if s == 0 || b < a {
                return Err(invalid(key, v, "range needs start <= stop and a positive step"));
            }
            Ok((a..=b).step_by(s).collect())
        }
        _ => Err(invalid(key, v, "expected start:stop:step or a list")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let ph = &mut self.phantom;
        match key {
            "seed" => t.seed = num(key, v)?,
            "patch_size" => t.patch_size = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "early_stop_patience" => t.early_stop_patience = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "validation_fraction" => t.validation_fraction = num(key, v)?,
            "flair_threshold" => t.flair_threshold = num(key, v)?,
            "augmentation" => t.augmentation = flag(key, v)?,
            "adadelta_rho" => t.adadelta.rho = num(key, v)?,
            "adadelta_epsilon" => t.adadelta.epsilon = num(key, v)?,
            "t_bin_grid" => t.grid.t_bins = float_grid(key, v)?,
            "l_min_grid" => t.grid.l_mins = int_grid(key, v)?,
            "channels" => self.channels = Some(names(v)),
            "chunk_planes" => self.chunk_planes = num(key, v)?,
            "min_overlap" => self.eval.min_overlap = num(key, v)?,
            "region_ppv" => self.eval.region_ppv = flag(key, v)?,
            "roc_l_min" => self.roc_l_min = num(key, v)?,
            "phantom_seed" => ph.seed = num(key, v)?,
            "phantom_dims" => {
                let [x, y, z] = triple(key, v)?;
                ph.dims = Dims::new(x, y, z);
            }
            "phantom_voxel_size" => ph.voxel_size = triple(key, v)?,
            "phantom_channels" => ph.channels = names(v),
            "phantom_lesions" => ph.lesions = pair(key, v)?,
            "phantom_radius" => ph.radius = pair(key, v)?,
            "phantom_contrast" => ph.contrast = num(key, v)?,
            "phantom_noise" => ph.noise_sigma = num(key, v)?,
            "data_dir" => self.data_dir = Some(v.into()),
            "model_dir" => self.model_dir = Some(v.into()),
            "case_dir" => self.case_dir = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            "pred_dir" => self.pred_dir = Some(v.into()),
            "gt_dir" => self.gt_dir = Some(v.into()),
            "report" => self.report = Some(v.into()),
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        if self.chunk_planes == 0 {
            return Err(Error::InvalidConfig("chunk_planes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.min_overlap) {
            return Err(Error::InvalidConfig("min_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Text listing of every key with its description.
    pub fn describe_keys() -> String {
        let mut out = String::new();
        for (k, d) in KEYS {
            let _ = writeln!(out, "{k:<22} {d}");
        }
        out
    }
}
