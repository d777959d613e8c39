//! Two-pass cascade inference, binarization with minimum-region filtering,
//! and the choice of test parameters from training cases.

pub mod scorer;

use std::cmp::Ordering;
use std::fmt::Write as _;

pub use scorer::{
    prefer_dense, score_coords, score_patches, score_plane_range, score_volume, score_volume_chunked, supports_dense,
};

use crate::cascade::CascadeModel;
use crate::error::{Error, Result};
use crate::metrics::{self, label_components_by, Components, VoxelCounts};
use crate::volume::{BinaryMask, Coord, Dims, MultiChannelCase, Volume};

/// First-stage probability at or above which a voxel is re-scored by the
/// second network.
pub const CASCADE_GATE: f32 = 0.5;

/// Per-voxel lesion probability over a case grid; every value is in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    dims: Dims,
    voxel_size: [f32; 3],
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(dims: Dims, voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let v = Volume::new(dims, voxel_size, data)?;
        Self::from_volume(v)
    }

    pub fn from_volume(v: Volume) -> Result<Self> {
        if let Some((i, p)) = v.data().iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::shape(format!("probability {p} at index {i} outside [0, 1]")));
        }
        Ok(ProbabilityMap { dims: v.dims(), voxel_size: v.voxel_size(), data: v.into_data() })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, self.voxel_size, self.data.clone()).expect("map geometry is valid")
    }
}

/// Both stages of a cascade prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeMaps {
    /// First-stage probability of every voxel.
    pub first: ProbabilityMap,
    /// Cascade output: second-stage probability where the first stage is at
    /// least [`CASCADE_GATE`], exactly 0 elsewhere.
    pub cascade: ProbabilityMap,
}

fn prepare(model: &CascadeModel, case: &MultiChannelCase) -> Result<MultiChannelCase> {
    case.with_channel_order(&model.channel_order)
}

/// Cascade probability map of a normalized case.
pub fn predict_probability(model: &CascadeModel, case: &MultiChannelCase) -> Result<ProbabilityMap> {
    Ok(predict_maps(model, case)?.cascade)
}

/// First-stage and cascade maps of a normalized case.
pub fn predict_maps(model: &CascadeModel, case: &MultiChannelCase) -> Result<CascadeMaps> {
    predict_maps_chunked(model, case, usize::MAX)
}

/// As [`predict_maps`], holding at most `chunk_planes` z-planes of
/// intermediate maps at a time. The result does not depend on the chunking.
pub fn predict_maps_chunked(model: &CascadeModel, case: &MultiChannelCase, chunk_planes: usize) -> Result<CascadeMaps> {
    let case = prepare(model, case)?;
    let y1 = score_volume_chunked(&model.cnn1, &case, chunk_planes)?;
    let first = ProbabilityMap::new(case.dims(), case.voxel_size(), y1)?;
    let cascade = second_stage(model, &case, &first, chunk_planes)?;
    Ok(CascadeMaps { first, cascade })
}

/// Cascade map given an existing first-stage map of the same case.
pub fn cascade_from_first(model: &CascadeModel, case: &MultiChannelCase, first: &ProbabilityMap) -> Result<ProbabilityMap> {
    let case = prepare(model, case)?;
    if first.dims() != case.dims() {
        return Err(Error::shape("first-stage map dims differ from the case"));
    }
    second_stage(model, &case, first, usize::MAX)
}

fn second_stage(
    model: &CascadeModel,
    case: &MultiChannelCase,
    first: &ProbabilityMap,
    chunk_planes: usize,
) -> Result<ProbabilityMap> {
    let dims = case.dims();
    let gated = first.data().iter().filter(|&&p| p >= CASCADE_GATE).count();
    // one decision per case so that chunking cannot change the evaluator
    let dense = prefer_dense(&model.cnn2, gated, dims.len());
    let chunk = chunk_planes.clamp(1, dims.nz);
    let plane = dims.nx * dims.ny;
    let mut out = vec![0.0f32; dims.len()];
    let mut z0 = 0;
    while z0 < dims.nz {
        let z1 = (z0 + chunk).min(dims.nz);
        let range = z0 * plane..z1 * plane;
        let idx: Vec<usize> = range.clone().filter(|&i| first.data()[i] >= CASCADE_GATE).collect();
        if !idx.is_empty() {
            if dense {
                let y2 = score_plane_range(&model.cnn2, case, z0, z1)?;
                for &i in &idx {
                    out[i] = y2[i - range.start];
                }
            } else {
                let coords: Vec<Coord> = idx.iter().map(|&i| dims.coord(i)).collect();
                for (&i, p) in idx.iter().zip(score_patches(&model.cnn2, case, &coords)?) {
                    out[i] = p;
                }
            }
        }
        z0 = z1;
    }
    ProbabilityMap::new(dims, case.voxel_size(), out)
}

/// A thresholded, size-filtered segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub prob: ProbabilityMap,
    pub binary: BinaryMask,
    /// Surviving 26-connected regions as sorted flat voxel indices.
    pub regions: Vec<Vec<usize>>,
    pub t_bin: f64,
    pub l_min: usize,
}

/// Thresholds `prob` at `t_bin` (voxels with probability >= `t_bin`) and
/// removes regions of fewer than `l_min` voxels.
pub fn binarize_and_filter(prob: &ProbabilityMap, t_bin: f64, l_min: usize) -> SegmentationOutput {
    let data = prob.data();
    let comps = label_components_by(prob.dims(), |i| data[i] as f64 >= t_bin);
    let regions: Vec<Vec<usize>> = comps.regions().into_iter().filter(|r| r.len() >= l_min).collect();
    let mut bits = vec![0u8; prob.dims().len()];
    for &i in regions.iter().flatten() {
        bits[i] = 1;
    }
    let binary = BinaryMask::new(prob.dims(), prob.voxel_size(), bits).expect("map geometry is valid");
    SegmentationOutput { prob: prob.clone(), binary, regions, t_bin, l_min }
}

/// Candidate values for the test-parameter search.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrid {
    pub t_bins: Vec<f64>,
    pub l_mins: Vec<usize>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid { t_bins: (1..20).map(|k| k as f64 / 20.0).collect(), l_mins: (0..=100).step_by(5).collect() }
    }
}

impl ParamGrid {
    pub fn validate(&self) -> Result<()> {
        if self.t_bins.is_empty() || self.l_mins.is_empty() {
            return Err(Error::InvalidConfig("test-parameter grids must be non-empty".into()));
        }
        if self.t_bins.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidConfig("t_bin grid values must lie in (0, 1)".into()));
        }
        if self.t_bins.windows(2).any(|w| w[0] >= w[1]) || self.l_mins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("grids must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Grid value nearest to `t`, the smaller one on a tie.
    pub fn nearest_t_bin(&self, t: f64) -> f64 {
        let mut best = self.t_bins[0];
        for &g in &self.t_bins[1..] {
            if (g - t).abs() < (best - t).abs() {
                best = g;
            }
        }
        best
    }
}

/// Best parameters for one case and the DSC they reach.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseOptimum {
    pub t_bin: f64,
    pub l_min: usize,
    pub dsc: f64,
}

/// Chosen test parameters with the per-case optima they average.
#[derive(Clone, Debug, PartialEq)]
pub struct TestParams {
    pub t_bin: f64,
    pub l_min: usize,
    pub per_case: Vec<CaseOptimum>,
}

/// DSC as an exact fraction `num / den`, with two empty masks at 1 / 1.
#[derive(Clone, Copy, Debug)]
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    fn dsc(tp: usize, seg: usize, gt: usize) -> Ratio {
        if seg + gt == 0 {
            Ratio { num: 1, den: 1 }
        } else {
            Ratio { num: 2 * tp as u64, den: (seg + gt) as u64 }
        }
    }

    fn cmp(&self, o: &Ratio) -> Ordering {
        (self.num as u128 * o.den as u128).cmp(&(o.num as u128 * self.den as u128))
    }

    fn percent(&self) -> f64 {
        100.0 * self.num as f64 / self.den as f64
    }
}

/// Per-region size and overlap with the reference mask at one threshold.
fn region_overlaps(comps: &Components, mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut hit = vec![0usize; comps.count()];
    for (&l, &m) in comps.labels.iter().zip(mask.data()) {
        if l > 0 && m != 0 {
            hit[l as usize - 1] += 1;
        }
    }
    comps.sizes.iter().copied().zip(hit).collect()
}

/// Grid search for one case. Ties prefer the smaller `t_bin`, then the
/// smaller `l_min`.
pub fn optimize_case(prob: &ProbabilityMap, mask: &BinaryMask, grid: &ParamGrid) -> Result<CaseOptimum> {
    grid.validate()?;
    if prob.dims() != mask.dims() {
        return Err(Error::shape("probability map and mask dims differ"));
    }
    let gt = mask.count();
    let data = prob.data();
    let mut best: Option<(Ratio, f64, usize)> = None;
    for &t in &grid.t_bins {
        let comps = label_components_by(prob.dims(), |i| data[i] as f64 >= t);
        let regions = region_overlaps(&comps, mask);
        for &l in &grid.l_mins {
            let (seg, tp) = regions
                .iter()
                .filter(|(size, _)| *size >= l)
                .fold((0, 0), |(s, h), (size, hit)| (s + size, h + hit));
            let r = Ratio::dsc(tp, seg, gt);
            if best.as_ref().is_none_or(|(b, _, _)| r.cmp(b) == Ordering::Greater) {
                best = Some((r, t, l));
            }
        }
    }
    let (r, t_bin, l_min) = best.expect("grids are non-empty");
    Ok(CaseOptimum { t_bin, l_min, dsc: r.percent() })
}

/// Averages per-case optima: `t_bin` snapped to the grid, `l_min` rounded
/// to the nearest integer.
pub fn optimize_from_maps(maps: &[(&ProbabilityMap, &BinaryMask)], grid: &ParamGrid) -> Result<TestParams> {
    if maps.is_empty() {
        return Err(Error::InvalidConfig("test-parameter optimization needs at least one case".into()));
    }
    let per_case = maps.iter().map(|(p, m)| optimize_case(p, m, grid)).collect::<Result<Vec<_>>>()?;
    let n = per_case.len() as f64;
    let t_mean = per_case.iter().map(|o| o.t_bin).sum::<f64>() / n;
    let l_mean = per_case.iter().map(|o| o.l_min as f64).sum::<f64>() / n;
    Ok(TestParams { t_bin: grid.nearest_t_bin(t_mean), l_min: l_mean.round() as usize, per_case })
}

/// Scores every training case with the cascade and chooses `(t_bin, l_min)`.
pub fn optimize_test_params(model: &CascadeModel, cases: &[MultiChannelCase], grid: &ParamGrid) -> Result<TestParams> {
    let mut maps = Vec::with_capacity(cases.len());
    for case in cases {
        let mask = case.require_mask()?;
        maps.push((predict_probability(model, case)?, mask));
    }
    let refs: Vec<(&ProbabilityMap, &BinaryMask)> = maps.iter().map(|(p, m)| (p, *m)).collect();
    optimize_from_maps(&refs, grid)
}

/// One threshold of a ROC sweep; rates in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub t_bin: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub dsc: f64,
    /// Positive voxels after filtering.
    pub positives: usize,
}

pub const ROC_HEADER: &str = "t_bin,tpr,fpr,dsc";

/// Region TPR/FPR and voxel DSC over the thresholds `t_bins` with a fixed
/// `l_min`. Undefined rates are reported as 0.
pub fn roc_sweep(prob: &ProbabilityMap, mask: &BinaryMask, l_min: usize, t_bins: &[f64]) -> Result<Vec<RocPoint>> {
    if prob.dims() != mask.dims() {
        return Err(Error::shape("probability map and mask dims differ"));
    }
    let gt_comps = metrics::label_components(mask);
    t_bins
        .iter()
        .map(|&t| {
            let seg = binarize_and_filter(prob, t, l_min);
            let vc: VoxelCounts = metrics::voxel_counts(&seg.binary, mask)?;
            let rc = metrics::match_components(&metrics::label_components(&seg.binary), &gt_comps, 0.0);
            Ok(RocPoint {
                t_bin: t,
                tpr: metrics::or_zero(metrics::tpr(&rc)),
                fpr: metrics::or_zero(metrics::fpr(&rc)),
                dsc: metrics::dsc(&vc),
                positives: vc.seg_total,
            })
        })
        .collect()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from(ROC_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(out, "{:.2},{:.6},{:.6},{:.6}", p.t_bin, p.tpr, p.fpr, p.dsc);
    }
    out
}
