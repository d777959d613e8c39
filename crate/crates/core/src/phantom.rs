//! Deterministic synthetic cases: a two-tissue background with a smooth
//! low-frequency field, non-touching axis-aligned ellipsoidal lesions and
//! Gaussian noise.
//!
//! The inner ellipsoidal region plays the part of white matter and holds
//! every lesion; the outer region is brighter on FLAIR and darker on T1, so
//! the FLAIR candidate filter keeps a realistic share of normal voxels.
//! Lesions are brighter than the background on FLAIR and darker on T1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mvol;
use crate::seed;
use crate::volume::{BinaryMask, Dims, MultiChannelCase, Volume, FLAIR};

/// Placement attempts per lesion before giving up.
pub const MAX_ATTEMPTS: usize = 1000;

/// Name of the file listing the case ids of a cohort directory.
pub const CASE_LIST: &str = "cases.txt";

/// Inner-region semi-axes as a fraction of each extent.
const INNER_FRACTION: f64 = 0.38;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    /// Channel names; must include FLAIR.
    pub channels: Vec<String>,
    /// Inclusive range of lesions per case.
    pub lesions: (usize, usize),
    /// Range of lesion semi-axes in voxels.
    pub radius: (f64, f64),
    /// FLAIR lesion offset; T1 lesions are offset by minus half of it.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: Dims::cube(48),
            voxel_size: [1.0; 3],
            channels: vec!["T1".into(), FLAIR.into()],
            lesions: (2, 6),
            radius: (2.0, 5.0),
            contrast: 2.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.dims.validate()?;
        if !self.channels.iter().any(|c| c == FLAIR) {
            return bad(format!("phantom channels {:?} lack {FLAIR}", self.channels));
        }
        if self.lesions.0 > self.lesions.1 {
            return bad(format!("lesion count range {:?} is empty", self.lesions));
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1 && self.radius.1.is_finite()) {
            return bad(format!("lesion radius range {:?} must satisfy 1 <= min <= max", self.radius));
        }
        let inner = self.dims.as_array().iter().map(|&n| INNER_FRACTION * n as f64).fold(f64::INFINITY, f64::min);
        if self.lesions.1 > 0 && inner < self.radius.1 + 1.0 {
            return bad(format!("dims {:?} too small for lesions of radius {}", self.dims.as_array(), self.radius.1));
        }
        if !(self.contrast.is_finite() && self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("contrast and noise_sigma must be finite, noise non-negative".into());
        }
        Ok(())
    }
}

/// Case id of cohort member `index`.
pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Voxel index ranges of the bounding box, clipped to `dims`.
    fn bbox(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let lo = (self.center[a] - self.semi[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.semi[a]).ceil() as usize + 1).min(dims[a]);
            (lo, hi)
        })
    }
}

fn inner_region(dims: [usize; 3]) -> Ellipsoid {
    Ellipsoid {
        center: dims.map(|n| (n as f64 - 1.0) / 2.0),
        semi: dims.map(|n| INNER_FRACTION * n as f64),
    }
}

/// Smooth field: a sum of three low-frequency cosines.
struct Field {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Field {
    fn new(rng: &mut impl Rng, dims: [usize; 3]) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = std::array::from_fn(|a| rng.random_range(-1.0..1.0) * std::f64::consts::PI / dims[a] as f64);
                (k, rng.random_range(0.0..std::f64::consts::TAU), 0.1)
            })
            .collect();
        Field { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves.iter().map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()).sum()
    }
}

/// Mean intensities (inner, outer, lesion offset) of a channel.
fn tissue_levels(name: &str, contrast: f64) -> (f64, f64, f64) {
    match name {
        FLAIR => (1.0, 1.6, contrast),
        "T1" => (1.6, 1.0, -contrast / 2.0),
        _ => (1.2, 1.5, contrast / 2.0),
    }
}

/// Generates cohort member `index`; depends only on `cfg` and `index`.
pub fn generate_case(cfg: &PhantomConfig, index: usize) -> Result<MultiChannelCase> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, index as u64));
    let d = cfg.dims.as_array();
    let inner = inner_region(d);
    let n_lesions = rng.random_range(cfg.lesions.0..=cfg.lesions.1);

    // occupied voxels grown by one voxel, so lesions never touch
    let mut blocked = vec![false; cfg.dims.len()];
    let mut lesion = vec![0u8; cfg.dims.len()];
    for li in 0..n_lesions {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let semi: [f64; 3] = std::array::from_fn(|_| rng.random_range(cfg.radius.0..=cfg.radius.1));
            // integer centers keep a semi-axis of r covering the lattice ball of radius r
            let center: [f64; 3] = std::array::from_fn(|a| {
                let lo = (inner.center[a] - inner.semi[a]).ceil().max(0.0);
                let hi = (inner.center[a] + inner.semi[a]).floor().min(d[a] as f64 - 1.0);
                rng.random_range(lo..=hi).round()
            });
            let e = Ellipsoid { center, semi };
            let voxels = rasterize(&e, d);
            let fits = voxels.iter().all(|&i| {
                let c = cfg.dims.coord(i).map(|v| v as f64);
                !blocked[i] && inner.contains(c)
            });
            if !fits || voxels.is_empty() {
                continue;
            }
            for &i in &voxels {
                lesion[i] = 1;
                let [x, y, z] = cfg.dims.coord(i);
                for dz in z.saturating_sub(1)..=(z + 1).min(d[2] - 1) {
                    for dy in y.saturating_sub(1)..=(y + 1).min(d[1] - 1) {
                        for dx in x.saturating_sub(1)..=(x + 1).min(d[0] - 1) {
                            blocked[cfg.dims.index([dx, dy, dz])] = true;
                        }
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailure { case: index, lesion: li, attempts: MAX_ATTEMPTS });
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut channels = Vec::with_capacity(cfg.channels.len());
    for name in &cfg.channels {
        let field = Field::new(&mut rng, d);
        let (inside, outside, offset) = tissue_levels(name, cfg.contrast);
        let data = (0..cfg.dims.len())
            .map(|i| {
                let c = cfg.dims.coord(i).map(|v| v as f64);
                let base = if inner.contains(c) { inside } else { outside };
                let les = if lesion[i] != 0 { offset } else { 0.0 };
                (base + field.at(c) + les + noise.sample(&mut rng)) as f32
            })
            .collect();
        channels.push((name.clone(), Volume::new(cfg.dims, cfg.voxel_size, data)?));
    }
    let mask = BinaryMask::new(cfg.dims, cfg.voxel_size, lesion)?;
    MultiChannelCase::new(case_id(index), channels, Some(mask))
}

fn rasterize(e: &Ellipsoid, d: [usize; 3]) -> Vec<usize> {
    let [(x0, x1), (y0, y1), (z0, z1)] = e.bbox(d);
    let mut out = Vec::new();
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                if e.contains([x as f64, y as f64, z as f64]) {
                    out.push((z * d[1] + y) * d[0] + x);
                }
            }
        }
    }
    out
}

/// Cases `0..n_cases`, generated in parallel; identical to generating them
/// one by one.
pub fn generate_cohort(cfg: &PhantomConfig, n_cases: usize) -> Result<Vec<MultiChannelCase>> {
    generate_range(cfg, 0, n_cases)
}

/// Cases `start..start + n_cases`.
pub fn generate_range(cfg: &PhantomConfig, start: usize, n_cases: usize) -> Result<Vec<MultiChannelCase>> {
    if n_cases == 0 {
        return Err(Error::InvalidConfig("cohort needs at least one case".into()));
    }
    (start..start + n_cases).into_par_iter().map(|i| generate_case(cfg, i)).collect()
}

/// Writes every channel as `<id>_<channel>.mvol`, the mask as
/// `<id>_mask.mvol`, and the list of case ids.
pub fn write_cohort(cases: &[MultiChannelCase], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut list = String::new();
    for case in cases {
        for (name, v) in case.channels() {
            mvol::save_volume(dir.join(format!("{}_{name}.mvol", case.case_id)), v)?;
        }
        if let Some(m) = case.mask() {
            mvol::save_mask(dir.join(format!("{}_mask.mvol", case.case_id)), m)?;
        }
        let _ = writeln!(list, "{}", case.case_id);
    }
    let path = dir.join(CASE_LIST);
    fs::write(&path, list).map_err(|e| Error::io(&path, e))
}
