//! Segmentation evaluation: voxel overlap (VD, DSC, PPV), region-level
//! detection (TPR, FPR) and lesion-volume correlation.
//!
//! All percentages are in `[0, 100]`. Regions are 26-connected components.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims};

/// Connected components of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per voxel, 0 for background or the 1-based component label.
    pub labels: Vec<u32>,
    /// Voxel count per component; `sizes[k]` belongs to label `k + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Flat voxel indices of every component, in label order, each sorted.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

/// Labels the 26-connected components of the voxels where `on(i)` holds.
/// Labels are assigned in order of each component's lowest flat index.
pub fn label_components_by(dims: Dims, on: impl Fn(usize) -> bool) -> Components {
    let (nx, ny, nz) = (dims.nx as isize, dims.ny as isize, dims.nz as isize);
    let mut labels = vec![0u32; dims.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if labels[start] != 0 || !on(start) {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let [x, y, z] = dims.coord(i).map(|v| v as isize);
            for dz in -1..=1 {
                let zz = z + dz;
                if zz < 0 || zz >= nz {
                    continue;
                }
                for dy in -1..=1 {
                    let yy = y + dy;
                    if yy < 0 || yy >= ny {
                        continue;
                    }
                    for dx in -1..=1 {
                        let xx = x + dx;
                        if xx < 0 || xx >= nx {
                            continue;
                        }
                        let j = ((zz * ny + yy) * nx + xx) as usize;
                        if labels[j] == 0 && on(j) {
                            labels[j] = label;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

pub fn label_components(mask: &BinaryMask) -> Components {
    let data = mask.data();
    label_components_by(mask.dims(), |i| data[i] != 0)
}

fn check_dims(seg: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if seg.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "segmentation dims {:?} differ from ground truth dims {:?}",
            seg.dims().as_array(),
            gt.dims().as_array()
        )));
    }
    Ok(())
}

/// Voxel-level confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VoxelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub seg_total: usize,
    pub gt_total: usize,
}

pub fn voxel_counts(seg: &BinaryMask, gt: &BinaryMask) -> Result<VoxelCounts> {
    check_dims(seg, gt)?;
    let mut c = VoxelCounts::default();
    for (&s, &g) in seg.data().iter().zip(gt.data()) {
        match (s != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c.seg_total = c.tp + c.fp;
    c.gt_total = c.tp + c.fn_;
    Ok(c)
}

/// Dice similarity coefficient in percent. Two empty masks agree perfectly
/// and score 100.
pub fn dsc(c: &VoxelCounts) -> f64 {
    let denom = c.fn_ + c.fp + 2 * c.tp;
    if denom == 0 {
        log::info!("DSC of two empty masks defined as 100");
        return 100.0;
    }
    200.0 * c.tp as f64 / denom as f64
}

/// Absolute lesion-volume difference relative to the ground truth, in
/// percent, from total positive voxel counts.
pub fn vd(seg_total: usize, gt_total: usize) -> Result<f64> {
    if gt_total == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(100.0 * seg_total.abs_diff(gt_total) as f64 / gt_total as f64)
}

/// Region-level detection counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegionCounts {
    /// Ground-truth regions detected by the segmentation.
    pub tp: usize,
    /// Ground-truth regions missed.
    pub fn_: usize,
    /// Output regions not matching any ground-truth region.
    pub fp: usize,
    /// Output regions matching at least one ground-truth region.
    pub matched_output: usize,
}

/// Region matching with the default detection criterion: one shared voxel.
pub fn region_match(seg: &BinaryMask, gt: &BinaryMask) -> Result<RegionCounts> {
    region_match_with(seg, gt, 0.0)
}

/// Region matching where a pair of regions counts as overlapping when they
/// share at least one voxel and the shared voxels make up at least
/// `min_overlap` of the region being judged.
pub fn region_match_with(seg: &BinaryMask, gt: &BinaryMask, min_overlap: f64) -> Result<RegionCounts> {
    check_dims(seg, gt)?;
    let sc = label_components(seg);
    let gc = label_components(gt);
    Ok(match_components(&sc, &gc, min_overlap))
}

pub(crate) fn match_components(sc: &Components, gc: &Components, min_overlap: f64) -> RegionCounts {
    // shared voxels per (gt region, seg region)
    let mut shared: std::collections::BTreeMap<(u32, u32), usize> = Default::default();
    for (&s, &g) in sc.labels.iter().zip(&gc.labels) {
        if s > 0 && g > 0 {
            *shared.entry((g, s)).or_default() += 1;
        }
    }
    let mut gt_hit = vec![false; gc.count()];
    let mut seg_hit = vec![false; sc.count()];
    for (&(g, s), &n) in &shared {
        let (g, s) = (g as usize - 1, s as usize - 1);
        if n as f64 >= min_overlap * gc.sizes[g] as f64 {
            gt_hit[g] = true;
        }
        if n as f64 >= min_overlap * sc.sizes[s] as f64 {
            seg_hit[s] = true;
        }
    }
    let tp = gt_hit.iter().filter(|&&h| h).count();
    let matched_output = seg_hit.iter().filter(|&&h| h).count();
    RegionCounts { tp, fn_: gc.count() - tp, fp: sc.count() - matched_output, matched_output }
}

/// Fraction of ground-truth regions detected, in percent.
pub fn tpr(rc: &RegionCounts) -> Result<f64> {
    let denom = rc.tp + rc.fn_;
    if denom == 0 {
        return Err(Error::UndefinedRatio("TPR with no ground-truth regions"));
    }
    Ok(100.0 * rc.tp as f64 / denom as f64)
}

/// Fraction of detections that are spurious, in percent.
pub fn fpr(rc: &RegionCounts) -> Result<f64> {
    let denom = rc.fp + rc.tp;
    if denom == 0 {
        return Err(Error::UndefinedRatio("FPR with no detections"));
    }
    Ok(100.0 * rc.fp as f64 / denom as f64)
}

/// Voxel-level positive predictive value, in percent.
pub fn ppv(c: &VoxelCounts) -> Result<f64> {
    if c.seg_total == 0 {
        return Err(Error::UndefinedRatio("PPV of an empty segmentation"));
    }
    Ok(100.0 * c.tp as f64 / c.seg_total as f64)
}

/// Region-level positive predictive value: matched output regions over all
/// output regions, in percent.
pub fn region_ppv(rc: &RegionCounts) -> Result<f64> {
    let denom = rc.matched_output + rc.fp;
    if denom == 0 {
        return Err(Error::UndefinedRatio("region PPV with no output regions"));
    }
    Ok(100.0 * rc.matched_output as f64 / denom as f64)
}

/// Undefined ratios fall back to 0, with a log line.
pub(crate) fn or_zero(r: Result<f64>) -> f64 {
    r.unwrap_or_else(|e| {
        log::info!("{e}; reporting 0");
        0.0
    })
}

/// Sample Pearson correlation of paired values.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("pearson_r on {} and {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::DegenerateVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Options for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Minimum overlap fraction for a region detection; 0 means one voxel.
    pub min_overlap: f64,
    /// Report PPV over regions instead of voxels.
    pub region_ppv: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { min_overlap: 0.0, region_ppv: false }
    }
}

/// All metrics for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub case_id: String,
    pub vd: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub dsc: f64,
    pub ppv: f64,
    pub voxels: VoxelCounts,
    pub regions: RegionCounts,
    pub seg_vol_ml: f64,
    pub gt_vol_ml: f64,
}

pub const CSV_HEADER: &str = "case_id,vd,tpr,fpr,dsc,ppv,seg_vol_ml,gt_vol_ml";

pub fn evaluate(case_id: &str, seg: &BinaryMask, gt: &BinaryMask, opts: EvalOptions) -> Result<EvalReport> {
    let voxels = voxel_counts(seg, gt)?;
    let regions = region_match_with(seg, gt, opts.min_overlap)?;
    let ml = gt.voxel_ml();
    Ok(EvalReport {
        case_id: case_id.to_string(),
        vd: vd(voxels.seg_total, voxels.gt_total)?,
        tpr: or_zero(tpr(&regions)),
        fpr: or_zero(fpr(&regions)),
        dsc: dsc(&voxels),
        ppv: or_zero(if opts.region_ppv { region_ppv(&regions) } else { ppv(&voxels) }),
        voxels,
        regions,
        seg_vol_ml: voxels.seg_total as f64 * ml,
        gt_vol_ml: voxels.gt_total as f64 * ml,
    })
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.case_id, self.vd, self.tpr, self.fpr, self.dsc, self.ppv, self.seg_vol_ml, self.gt_vol_ml
        )
    }
}

/// Mean of every metric over the cohort, labelled `mean`.
pub fn cohort_mean(reports: &[EvalReport]) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(EvalReport {
        case_id: "mean".into(),
        vd: mean(|r| r.vd),
        tpr: mean(|r| r.tpr),
        fpr: mean(|r| r.fpr),
        dsc: mean(|r| r.dsc),
        ppv: mean(|r| r.ppv),
        voxels: VoxelCounts::default(),
        regions: RegionCounts::default(),
        seg_vol_ml: mean(|r| r.seg_vol_ml),
        gt_vol_ml: mean(|r| r.gt_vol_ml),
    })
}

/// Per-case rows followed by the cohort mean row.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports.iter().chain(cohort_mean(reports).as_ref()) {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Human-readable aligned table of the same rows.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}\n",
        "case", "VD", "TPR", "FPR", "DSC", "PPV", "seg ml", "gt ml"
    );
    for r in reports.iter().chain(cohort_mean(reports).as_ref()) {
        let _ = writeln!(
            out,
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10.3} {:>10.3}",
            r.case_id, r.vd, r.tpr, r.fpr, r.dsc, r.ppv, r.seg_vol_ml, r.gt_vol_ml
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Coord;

    fn mask_with(dims: Dims, on: &[Coord]) -> BinaryMask {
        let mut m = BinaryMask::zeros(dims, [1.0; 3]).unwrap();
        for &c in on {
            m.set(c, true);
        }
        m
    }

    #[test]
    fn identity_counts() {
        let d = Dims::cube(5);
        let on: Vec<Coord> = (0..10).map(|i| [i % 5, i / 5, 2]).collect();
        let m = mask_with(d, &on);
        let c = voxel_counts(&m, &m).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (10, 0, 0));
        assert_eq!(dsc(&c), 100.0);
        assert_eq!(vd(c.seg_total, c.gt_total).unwrap(), 0.0);
        let empty = BinaryMask::zeros(d, [1.0; 3]).unwrap();
        let c = voxel_counts(&empty, &m).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 10));
        assert_eq!(dsc(&c), 0.0);
    }

    #[test]
    fn arithmetic_examples() {
        let c = VoxelCounts { tp: 8, fp: 2, fn_: 2, seg_total: 10, gt_total: 10 };
        assert_eq!(dsc(&c), 80.0);
        assert_eq!(ppv(&c).unwrap(), 80.0);
        assert_eq!(vd(15, 10).unwrap(), 50.0);
        assert_eq!(vd(0, 10).unwrap(), 100.0);
        assert!(matches!(vd(3, 0), Err(Error::EmptyGroundTruth)));
        let rc = RegionCounts { tp: 1, fn_: 1, fp: 0, matched_output: 1 };
        assert_eq!(tpr(&rc).unwrap(), 50.0);
        assert_eq!(fpr(&rc).unwrap(), 0.0);
        assert_eq!(dsc(&VoxelCounts::default()), 100.0);
    }

    #[test]
    fn region_example_with_spurious_blob() {
        let d = Dims::cube(12);
        let gt = mask_with(d, &[[1, 1, 1], [1, 2, 1], [8, 8, 8]]);
        let seg = mask_with(d, &[[1, 1, 1], [5, 1, 1]]);
        let rc = region_match(&seg, &gt).unwrap();
        assert_eq!((rc.tp, rc.fn_, rc.fp), (1, 1, 1));
        assert_eq!(tpr(&rc).unwrap(), 50.0);
        assert_eq!(fpr(&rc).unwrap(), 50.0);
    }

    #[test]
    fn one_region_touching_two() {
        let d = Dims::cube(8);
        let gt = mask_with(d, &[[1, 1, 1], [5, 1, 1]]);
        let seg = mask_with(d, &[[1, 1, 1], [2, 1, 1], [3, 1, 1], [4, 1, 1], [5, 1, 1]]);
        let rc = region_match(&seg, &gt).unwrap();
        assert_eq!((rc.tp, rc.fn_, rc.fp), (2, 0, 0));
    }

    #[test]
    fn diagonal_neighbours_are_connected() {
        let d = Dims::cube(4);
        let m = mask_with(d, &[[0, 0, 0], [1, 1, 1], [3, 3, 3]]);
        let c = label_components(&m);
        assert_eq!(c.sizes, vec![2, 1]);
    }

    #[test]
    fn min_overlap_fraction() {
        let d = Dims::new(10, 1, 1);
        let gt = mask_with(d, &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let seg = mask_with(d, &[[3, 0, 0], [4, 0, 0]]);
        let loose = region_match_with(&seg, &gt, 0.0).unwrap();
        assert_eq!((loose.tp, loose.fp), (1, 0));
        // one of four gt voxels and one of two seg voxels are shared
        let strict = region_match_with(&seg, &gt, 0.5).unwrap();
        assert_eq!((strict.tp, strict.fp), (0, 0));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 4.0, 7.0, 11.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!((pearson_r(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        let yn: Vec<f64> = x.iter().map(|v| 3.0 - v).collect();
        assert!((pearson_r(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateVariance)));
        assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateVariance)));
    }

    #[test]
    fn csv_has_mean_row() {
        let d = Dims::cube(4);
        let m = mask_with(d, &[[1, 1, 1]]);
        let r = evaluate("c0", &m, &m, EvalOptions::default()).unwrap();
        let csv = reports_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("c0,0.000000,100.000000,0.000000,100.000000,100.000000,"));
        assert!(lines[2].starts_with("mean,"));
    }
}
