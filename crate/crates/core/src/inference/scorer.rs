//! Voxel-wise lesion probabilities from a patch classifier.
//!
//! [`score_patches`] runs the network on explicitly extracted patches. For
//! the 7-layer architecture, [`score_volume`] instead evaluates every patch
//! of a volume at once with shared intermediate maps, which is what makes
//! whole-volume inference affordable.
//!
//! # Dense evaluation
//!
//! The patch centered on voxel `v` has origin `o = v - h` (`h = p / 2`).
//! Inside that patch the first convolution sees zero padding at the patch
//! border, so its value at patch position `u` equals a whole-volume
//! convolution at `o + u` *without* the taps that would cross the border.
//! Only the low border matters: with `floor(p / 2)` odd, neither pooling
//! stage ever reads the last row of its input along any axis. The border
//! pattern at each stage is therefore a per-axis flag, and every stage is
//! computed once per flag combination over an extended grid covering all
//! patch origins:
//!
//! - `A_S`: conv1 without the `-1` taps on the axes in `S`, then BN and ReLU;
//! - `E_R`: first max-pool, where axes in `R` sit at pooled position 0;
//! - `F_s`: conv2 for a per-axis pooled-position class `s` in
//!   {0, 1, >= 2}, which decides both tap exclusion and the `E` flag of each
//!   tap, then BN and ReLU;
//! - `G`: second max-pool, gathered at `o + 4r` into the flattened
//!   fully-connected input.
//!
//! Grids are processed plane by plane along z. Every plane is computed the
//! same way whichever output planes are requested, so evaluating a volume
//! in z-chunks gives bit-identical results to evaluating it whole.

use rayon::prelude::*;

use crate::engine::scalar::gemm;
use crate::engine::{Layer, LayerSpec, Network, Tensor};
use crate::error::{Error, Result};
use crate::patch::extract_patches;
use crate::volume::{Coord, MultiChannelCase};

/// Patches per network call in [`score_patches`].
pub const PATCH_BATCH: usize = 256;

/// Lesion probability (softmax output 1) for the patches centered on
/// `coords`, evaluated in inference mode.
pub fn score_patches(net: &Network<f32>, case: &MultiChannelCase, coords: &[Coord]) -> Result<Vec<f32>> {
    let shape = net.input_shape();
    check_case(net, case)?;
    let p = shape[1];
    let plen: usize = shape.iter().product();
    let mut out = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(PATCH_BATCH) {
        let data = extract_patches(case, chunk, p)?;
        let mut s = vec![chunk.len()];
        s.extend_from_slice(shape);
        debug_assert_eq!(data.len(), chunk.len() * plen);
        let probs = net.infer(&Tensor::from_vec(&s, data)?)?;
        let k = probs.shape()[1];
        out.extend(probs.data().chunks_exact(k).map(|r| r[1]));
    }
    Ok(out)
}

fn check_case(net: &Network<f32>, case: &MultiChannelCase) -> Result<()> {
    let shape = net.input_shape();
    let p = shape.get(1).copied().unwrap_or(0);
    if shape.len() != 4 || shape[2] != p || shape[3] != p {
        return Err(Error::shape(format!("network input {shape:?} is not a cubic patch")));
    }
    if case.channels().len() != shape[0] {
        return Err(Error::shape(format!(
            "network takes {} channels, case {} has {}",
            shape[0],
            case.case_id,
            case.channels().len()
        )));
    }
    if net.output_shape() != [2] {
        return Err(Error::shape(format!("network output {:?} is not two-class", net.output_shape())));
    }
    Ok(())
}

/// Lesion probability of every voxel, in volume index order. Uses the
/// dense evaluator when the network has the 7-layer structure, per-patch
/// scoring otherwise.
pub fn score_volume(net: &Network<f32>, case: &MultiChannelCase) -> Result<Vec<f32>> {
    score_volume_chunked(net, case, usize::MAX)
}

/// As [`score_volume`], evaluating at most `chunk_planes` z-planes at a time
/// to bound memory. The result does not depend on `chunk_planes`.
pub fn score_volume_chunked(net: &Network<f32>, case: &MultiChannelCase, chunk_planes: usize) -> Result<Vec<f32>> {
    check_case(net, case)?;
    let dims = case.dims();
    let chunk = chunk_planes.clamp(1, dims.nz);
    let plan = DensePlan::new(net);
    let mut out = Vec::with_capacity(dims.len());
    let mut z0 = 0;
    while z0 < dims.nz {
        let z1 = (z0 + chunk).min(dims.nz);
        out.extend(score_planes_with(net, plan.as_ref(), case, z0, z1)?);
        z0 = z1;
    }
    Ok(out)
}

/// Lesion probability of every voxel in z-planes `z0..z1`, in volume index
/// order. Equal to the corresponding slice of [`score_volume`].
pub fn score_plane_range(net: &Network<f32>, case: &MultiChannelCase, z0: usize, z1: usize) -> Result<Vec<f32>> {
    check_case(net, case)?;
    if z0 > z1 || z1 > case.dims().nz {
        return Err(Error::shape(format!("plane range {z0}..{z1} outside 0..{}", case.dims().nz)));
    }
    score_planes_with(net, DensePlan::new(net).as_ref(), case, z0, z1)
}

fn score_planes_with(
    net: &Network<f32>,
    plan: Option<&DensePlan>,
    case: &MultiChannelCase,
    z0: usize,
    z1: usize,
) -> Result<Vec<f32>> {
    if z0 == z1 {
        return Ok(vec![]);
    }
    match plan {
        Some(plan) => plan.score_planes(case, z0, z1),
        None => {
            let dims = case.dims();
            let plane = dims.nx * dims.ny;
            let coords: Vec<Coord> = (z0 * plane..z1 * plane).map(|i| dims.coord(i)).collect();
            score_patches(net, case, &coords)
        }
    }
}

/// Whether scoring `n_coords` of `n_voxels` voxels is cheaper through the
/// dense evaluator than patch by patch. A dense pass costs roughly as much
/// as scoring a fifth of the voxels individually.
pub fn prefer_dense(net: &Network<f32>, n_coords: usize, n_voxels: usize) -> bool {
    n_coords > 0 && n_coords.saturating_mul(5) >= n_voxels && supports_dense(net)
}

/// Lesion probability at `coords`, through whichever of the dense and the
/// per-patch evaluator is cheaper.
pub fn score_coords(net: &Network<f32>, case: &MultiChannelCase, coords: &[Coord]) -> Result<Vec<f32>> {
    let dims = case.dims();
    if let Some(&coord) = coords.iter().find(|&&c| !dims.contains(c)) {
        return Err(Error::CoordOutOfVolume { coord, dims: dims.as_array() });
    }
    if prefer_dense(net, coords.len(), dims.len()) {
        let all = score_volume(net, case)?;
        Ok(coords.iter().map(|&c| all[dims.index(c)]).collect())
    } else {
        score_patches(net, case, coords)
    }
}

/// Whether [`score_volume`] will use the dense evaluator for `net`.
pub fn supports_dense(net: &Network<f32>) -> bool {
    DensePlan::new(net).is_some()
}

/// Grid rows and output channels per second-layer work block.
const BAND_ROWS: usize = 16;
const C2_BLOCK: usize = 8;

const A: usize = 0;
const B: usize = 1;
const C: usize = 2;

/// Per-axis pooled-position classes after the first pooling stage: 0, 1
/// and ">= 2". Tap `t` (in {-1, 0, 1}) is excluded for class 0 at `t = -1`;
/// the tap reads an `E` value at pooled position 0 for (class 0, t = 0) and
/// (class 1, t = -1).
fn tap_allowed(class: usize, t: isize) -> bool {
    !(class == A && t == -1)
}

fn tap_at_zero(class: usize, t: isize) -> bool {
    (class == A && t == 0) || (class == B && t == -1)
}

/// Stacked second-layer weights for one `(tz, R)` pair.
struct TapGroup {
    taps: Vec<(isize, isize)>,
    /// Per output-channel block, `[taps * block, c1]`.
    blocks: Vec<Vec<f32>>,
}

struct DensePlan {
    c: usize,
    p: usize,
    m2: usize,
    c1: usize,
    c2: usize,
    units: usize,
    /// conv1 weights with the `-1` taps of the axes in `S` zeroed, `[c1, c*27]`
    w1: Vec<Vec<f32>>,
    b1: Vec<f32>,
    bn1: (Vec<f32>, Vec<f32>),
    /// indexed by `(tz + 1) * 8 + R`
    w2: Vec<Option<TapGroup>>,
    b2: Vec<f32>,
    bn2: (Vec<f32>, Vec<f32>),
    wf: Vec<f32>,
    bf: Vec<f32>,
    wg: Vec<f32>,
    bg: Vec<f32>,
}

/// Axis bits: 1 = x, 2 = y, 4 = z.
const AXIS_BITS: [usize; 3] = [1, 2, 4];

impl DensePlan {
    fn new(net: &Network<f32>) -> Option<DensePlan> {
        let l = net.layers();
        if l.len() != 13 {
            return None;
        }
        let conv_ok = |s: LayerSpec| matches!(s, LayerSpec::Conv3d { size: 3, stride: 1, pad: 1, .. });
        let pool_ok = |s: LayerSpec| matches!(s, LayerSpec::MaxPool3d { size: 2, stride: 2 });
        let (Layer::Conv(conv1), Layer::Bn(bn1), Layer::Relu(_), Layer::Pool(_), Layer::Conv(conv2), Layer::Bn(bn2), Layer::Relu(_), Layer::Pool(_), Layer::Dropout(_), Layer::Fc(fc1), Layer::Relu(_), Layer::Fc(fc2), Layer::Softmax(_)) =
            (&l[0], &l[1], &l[2], &l[3], &l[4], &l[5], &l[6], &l[7], &l[8], &l[9], &l[10], &l[11], &l[12])
        else {
            return None;
        };
        if !conv_ok(l[0].spec()) || !conv_ok(l[4].spec()) || !pool_ok(l[3].spec()) || !pool_ok(l[7].spec()) {
            return None;
        }
        let shape = net.input_shape();
        let p = shape[1];
        let m1 = p / 2;
        if p < 7 || m1 % 2 == 0 || fc2.units() != 2 {
            return None;
        }
        let (c, c1, c2) = (shape[0], conv1.geometry.out_channels, conv2.geometry.out_channels);
        let w1_full = conv1.weight.data();
        let w1 = (0..8)
            .map(|s| {
                let mut w = w1_full.to_vec();
                for (row, chunk) in w.chunks_exact_mut(27).enumerate() {
                    let _ = row;
                    for (k, v) in chunk.iter_mut().enumerate() {
                        let t = [(k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1];
                        if (0..3).any(|i| s & AXIS_BITS[i] != 0 && t[i] == -1) {
                            *v = 0.0;
                        }
                    }
                }
                w
            })
            .collect();
        let w2_full = conv2.weight.data();
        let mut w2 = Vec::with_capacity(24);
        for tz in -1isize..=1 {
            for r in 0..8usize {
                if r & 4 != 0 && tz == 1 {
                    w2.push(None);
                    continue;
                }
                let mut taps = Vec::new();
                for ty in -1isize..=1 {
                    for tx in -1isize..=1 {
                        if (r & 2 != 0 && ty == 1) || (r & 1 != 0 && tx == 1) {
                            continue;
                        }
                        taps.push((ty, tx));
                    }
                }
                let cb = C2_BLOCK.min(c2);
                let blocks = (0..c2)
                    .step_by(cb)
                    .map(|c0| {
                        let mut weight = Vec::with_capacity(taps.len() * cb * c1);
                        for &(ty, tx) in &taps {
                            let k = (((tz + 1) * 3 + ty + 1) * 3 + tx + 1) as usize;
                            for o in c0..(c0 + cb).min(c2) {
                                for i in 0..c1 {
                                    weight.push(w2_full[(o * c1 + i) * 27 + k]);
                                }
                            }
                        }
                        weight
                    })
                    .collect();
                w2.push(Some(TapGroup { taps, blocks }));
            }
        }
        Some(DensePlan {
            c,
            p,
            m2: (m1 - 2) / 2 + 1,
            c1,
            c2,
            units: fc1.units(),
            w1,
            b1: conv1.bias.data().to_vec(),
            bn1: bn1.affine(),
            w2,
            b2: conv2.bias.data().to_vec(),
            bn2: bn2.affine(),
            wf: fc1.weight.data().to_vec(),
            bf: fc1.bias.data().to_vec(),
            wg: fc2.weight.data().to_vec(),
            bg: fc2.bias.data().to_vec(),
        })
    }

    /// Probabilities for voxel planes `[z0, z1)`.
    fn score_planes(&self, case: &MultiChannelCase, z0: usize, z1: usize) -> Result<Vec<f32>> {
        let dims = case.dims();
        let h = self.p / 2;
        // extended grid: grid index i holds volume coordinate i - h
        let grid = [dims.nx + 2 * h - 1, dims.ny + 2 * h - 1, dims.nz + 2 * h - 1];
        let last = grid[2] - 1;
        let g_hi = (z1 - 1 + 4 * (self.m2 - 1)).min(last);
        let f_hi = (g_hi + 2).min(last);
        let e_lo = z0.saturating_sub(2);
        let e_hi = (f_hi + 2).min(last);
        let a_hi = (e_hi + 1).min(last);

        let a: Vec<Vec<f32>> = (e_lo..=a_hi).into_par_iter().map(|z| self.plane_a(case, grid, z)).collect();
        let e: Vec<Vec<f32>> =
            (e_lo..=e_hi).into_par_iter().map(|z| self.plane_e(&a, e_lo, a_hi, grid, z)).collect();

        let pl = grid[0] * grid[1];
        let gsize = 8 * self.c2 * pl;
        let mut g: Vec<Vec<f32>> = (z0..=g_hi).map(|_| vec![f32::NEG_INFINITY; gsize]).collect();
        // F planes are independent; pooling into G is applied in plane
        // order so the result does not depend on the thread count
        let fz_all: Vec<usize> = (z0..=f_hi).collect();
        for batch in fz_all.chunks(rayon::current_num_threads().max(1)) {
            let fs: Vec<Vec<f32>> = batch.par_iter().map(|&fz| self.plane_f(&e, e_lo, e_hi, grid, fz)).collect();
            for (&fz, f) in batch.iter().zip(&fs) {
                self.pool_into_g(f, fz, z0, g_hi, grid, &mut g);
            }
        }
        let (nx, ny) = (dims.nx, dims.ny);
        let planes: Vec<Vec<f32>> = (z0..z1).into_par_iter().map(|vz| self.plane_fc(&g, z0, grid, nx, ny, vz)).collect();
        Ok(planes.concat())
    }

    /// `A_S` for all eight `S`, layout `[S][c1][y][x]`.
    fn plane_a(&self, case: &MultiChannelCase, grid: [usize; 3], gz: usize) -> Vec<f32> {
        let dims = case.dims();
        let h = (self.p / 2) as isize;
        let pl = grid[0] * grid[1];
        let rows = self.c * 27;
        let mut cols = vec![0.0f32; rows * pl];
        for (ci, (_, vol)) in case.channels().iter().enumerate() {
            let data = vol.data();
            for k in 0..27 {
                let t = [(k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1];
                let z = gz as isize - h + t[2];
                let dst = &mut cols[(ci * 27 + k) * pl..(ci * 27 + k + 1) * pl];
                if z < 0 || z >= dims.nz as isize {
                    continue;
                }
                for gy in 0..grid[1] {
                    let y = gy as isize - h + t[1];
                    if y < 0 || y >= dims.ny as isize {
                        continue;
                    }
                    let src = &data[(z as usize * dims.ny + y as usize) * dims.nx..][..dims.nx];
                    // grid x maps to volume x = gx - h + tx
                    let off = h - t[0];
                    let lo = off.max(0) as usize;
                    let hi = ((dims.nx as isize + off).min(grid[0] as isize)) as usize;
                    let line = &mut dst[gy * grid[0]..(gy + 1) * grid[0]];
                    line[lo..hi].copy_from_slice(&src[(lo as isize - off) as usize..(hi as isize - off) as usize]);
                }
            }
        }
        let (scale, shift) = &self.bn1;
        let mut out = vec![0.0f32; 8 * self.c1 * pl];
        for (s, o) in out.chunks_exact_mut(self.c1 * pl).enumerate() {
            for (ch, row) in o.chunks_exact_mut(pl).enumerate() {
                row.fill(self.b1[ch]);
            }
            gemm(self.c1, rows, pl, 1.0, &self.w1[s], false, &cols, false, 1.0, o);
            for (ch, row) in o.chunks_exact_mut(pl).enumerate() {
                for v in row {
                    let y = *v * scale[ch] + shift[ch];
                    *v = if y > 0.0 { y } else { 0.0 };
                }
            }
        }
        out
    }

    /// `E_R` for all eight `R`, layout `[R][c1][y][x]`.
    fn plane_e(&self, a: &[Vec<f32>], a_lo: usize, a_hi: usize, grid: [usize; 3], gz: usize) -> Vec<f32> {
        let pl = grid[0] * grid[1];
        let cp = self.c1 * pl;
        let mut out = vec![f32::NEG_INFINITY; 8 * cp];
        for r in 0..8 {
            let dst = &mut out[r * cp..(r + 1) * cp];
            for d in 0..8usize {
                let (dx, dy, dz) = (d & 1, (d >> 1) & 1, (d >> 2) & 1);
                if gz + dz > a_hi {
                    continue;
                }
                let zero = (if dx == 0 { 1 } else { 0 }) | (if dy == 0 { 2 } else { 0 }) | (if dz == 0 { 4 } else { 0 });
                let s = r & zero;
                let src = &a[gz + dz - a_lo][s * cp..(s + 1) * cp];
                // one contiguous run per plane; the wrapped cells at the
                // row ends are never read downstream
                let off = dy * grid[0] + dx;
                for (o, v) in dst[..cp - off].iter_mut().zip(&src[off..]) {
                    if *v > *o {
                        *o = *v;
                    }
                }
            }
        }
        // cells never reached (last row/column) stay finite
        for v in &mut out {
            if *v == f32::NEG_INFINITY {
                *v = 0.0;
            }
        }
        out
    }

    /// Activated conv2 output for all 27 position classes, layout
    /// `[class][c2][y][x]` with class `(sz * 3 + sy) * 3 + sx`.
    ///
    /// Work is blocked by output rows and output channels so that the
    /// per-tap products and the class accumulators stay cache-resident.
    fn plane_f(&self, e: &[Vec<f32>], e_lo: usize, e_hi: usize, grid: [usize; 3], gz: usize) -> Vec<f32> {
        let pl = grid[0] * grid[1];
        let c2p = self.c2 * pl;
        let mut f = vec![0.0f32; 27 * c2p];
        let cb = C2_BLOCK.min(self.c2);
        let max_taps = self.w2.iter().flatten().map(|g| g.taps.len()).max().unwrap_or(0);
        let max_bw = (BAND_ROWS + 4).min(grid[1]) * grid[0];
        let mut acc = vec![0.0f32; 27 * cb * BAND_ROWS.min(grid[1]) * grid[0]];
        let mut q = vec![0.0f32; max_taps * cb * max_bw];
        let mut band = vec![0.0f32; self.c1 * max_bw];
        for gy0 in (0..grid[1]).step_by(BAND_ROWS) {
            let gy1 = (gy0 + BAND_ROWS).min(grid[1]);
            let fw = (gy1 - gy0) * grid[0];
            // E rows read by this band, with the +-2 row halo
            let ey0 = gy0.saturating_sub(2);
            let ey1 = (gy1 + 2).min(grid[1]);
            let bw = (ey1 - ey0) * grid[0];
            for c0 in (0..self.c2).step_by(cb) {
                let nb = cb.min(self.c2 - c0);
                let acc = &mut acc[..27 * nb * fw];
                for block in acc.chunks_exact_mut(nb * fw) {
                    for (ch, row) in block.chunks_exact_mut(fw).enumerate() {
                        row.fill(self.b2[c0 + ch]);
                    }
                }
                for tz in -1isize..=1 {
                    let ez = gz as isize + 2 * tz;
                    if ez < e_lo as isize || ez > e_hi as isize {
                        continue;
                    }
                    let eplane = &e[ez as usize - e_lo];
                    for r in 0..8usize {
                        let Some(group) = &self.w2[((tz + 1) * 8) as usize + r] else { continue };
                        let classes_z: Vec<usize> =
                            (0..3).filter(|&s| tap_allowed(s, tz) && tap_at_zero(s, tz) == (r & 4 != 0)).collect();
                        let src = &eplane[r * self.c1 * pl..(r + 1) * self.c1 * pl];
                        let band = &mut band[..self.c1 * bw];
                        for (ch, dst) in band.chunks_exact_mut(bw).enumerate() {
                            dst.copy_from_slice(&src[ch * pl + ey0 * grid[0]..][..bw]);
                        }
                        let n = group.taps.len();
                        let q = &mut q[..n * nb * bw];
                        let w = &group.blocks[c0 / cb];
                        gemm(n * nb, self.c1, bw, 1.0, w, false, band, false, 0.0, q);
                        for (k, &(ty, tx)) in group.taps.iter().enumerate() {
                            let qk = &q[k * nb * bw..(k + 1) * nb * bw];
                            let classes_y: Vec<usize> =
                                (0..3).filter(|&s| tap_allowed(s, ty) && tap_at_zero(s, ty) == (r & 2 != 0)).collect();
                            let classes_x: Vec<usize> =
                                (0..3).filter(|&s| tap_allowed(s, tx) && tap_at_zero(s, tx) == (r & 1 != 0)).collect();
                            let sx = 2 * tx;
                            let x_lo = (-sx).max(0) as usize;
                            let x_hi = (grid[0] as isize - sx.max(0)) as usize;
                            // output row gy reads E row gy + 2 ty
                            let y_lo = (gy0 as isize).max(-2 * ty) as usize;
                            let y_hi = (gy1 as isize).min(grid[1] as isize - 2 * ty) as usize;
                            if y_hi <= y_lo {
                                continue;
                            }
                            for &cz in &classes_z {
                                for &cy in &classes_y {
                                    for &cx in &classes_x {
                                        let class = (cz * 3 + cy) * 3 + cx;
                                        let dst = &mut acc[class * nb * fw..(class + 1) * nb * fw];
                                        for ch in 0..nb {
                                            let d0 = ch * fw + (y_lo - gy0) * grid[0] + x_lo;
                                            let d1 = ch * fw + (y_hi - 1 - gy0) * grid[0] + x_hi;
                                            let ey = (y_lo as isize + 2 * ty) as usize - ey0;
                                            let s0 = ((ch * bw + ey * grid[0] + x_lo) as isize + sx) as usize;
                                            for (o, v) in dst[d0..d1].iter_mut().zip(&qk[s0..s0 + (d1 - d0)]) {
                                                *o += *v;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let (scale, shift) = &self.bn2;
                for class in 0..27 {
                    for ch in 0..nb {
                        let c = c0 + ch;
                        let src = &acc[(class * nb + ch) * fw..][..fw];
                        let dst = &mut f[class * c2p + c * pl + gy0 * grid[0]..][..fw];
                        for (o, v) in dst.iter_mut().zip(src) {
                            let y = *v * scale[c] + shift[c];
                            *o = if y > 0.0 { y } else { 0.0 };
                        }
                    }
                }
            }
        }
        f
    }

    /// Second max-pool: F plane `fz` contributes to G planes `fz` (dz = 0)
    /// and `fz - 2` (dz = 1).
    fn pool_into_g(&self, f: &[f32], fz: usize, g_lo: usize, g_hi: usize, grid: [usize; 3], g: &mut [Vec<f32>]) {
        let pl = grid[0] * grid[1];
        let c2p = self.c2 * pl;
        for dz in 0..2usize {
            let Some(gz) = fz.checked_sub(2 * dz) else { continue };
            if gz < g_lo || gz > g_hi {
                continue;
            }
            let gplane = &mut g[gz - g_lo];
            for rg in 0..8usize {
                let class_of = |bit: usize, d: usize| if rg & bit != 0 { if d == 0 { A } else { B } } else { C };
                let cz = class_of(4, dz);
                let dst = &mut gplane[rg * c2p..(rg + 1) * c2p];
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let class = (cz * 3 + class_of(2, dy)) * 3 + class_of(1, dx);
                        let src = &f[class * c2p..(class + 1) * c2p];
                        // wrapped cells at the row ends are never read
                        let off = 2 * dy * grid[0] + 2 * dx;
                        for (o, v) in dst[..c2p - off].iter_mut().zip(&src[off..]) {
                            if *v > *o {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fully-connected head for every voxel of plane `vz`.
    fn plane_fc(&self, g: &[Vec<f32>], g_lo: usize, grid: [usize; 3], nx: usize, ny: usize, vz: usize) -> Vec<f32> {
        let pl = grid[0] * grid[1];
        let c2p = self.c2 * pl;
        let m2 = self.m2;
        let feat = self.c2 * m2 * m2 * m2;
        let n = nx * ny;
        let mut j = vec![0.0f32; n * feat];
        for vy in 0..ny {
            for vx in 0..nx {
                let row = &mut j[(vy * nx + vx) * feat..][..feat];
                let mut i = 0;
                for ch in 0..self.c2 {
                    for rz in 0..m2 {
                        for ry in 0..m2 {
                            for rx in 0..m2 {
                                let rg = (if rx == 0 { 1 } else { 0 }) | (if ry == 0 { 2 } else { 0 }) | (if rz == 0 { 4 } else { 0 });
                                let plane = &g[vz + 4 * rz - g_lo];
                                row[i] = plane[rg * c2p + ch * pl + (vy + 4 * ry) * grid[0] + vx + 4 * rx];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        let u = self.units;
        let mut hidden = Vec::with_capacity(n * u);
        for _ in 0..n {
            hidden.extend_from_slice(&self.bf);
        }
        gemm(n, feat, u, 1.0, &j, false, &self.wf, true, 1.0, &mut hidden);
        for v in &mut hidden {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        let mut logits = Vec::with_capacity(n * 2);
        for _ in 0..n {
            logits.extend_from_slice(&self.bg);
        }
        gemm(n, u, 2, 1.0, &hidden, false, &self.wg, true, 1.0, &mut logits);
        logits
            .chunks_exact(2)
            .map(|l| {
                let m = l[0].max(l[1]);
                let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
                e1 / (e0 + e1)
            })
            .collect()
    }
}
