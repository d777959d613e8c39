//! Cubic multi-channel patches centered on voxels.
//!
//! A patch is stored `[channel][z][y][x]` with x fastest, matching the
//! `[c, p, p, p]` tensor layout the networks consume.

use crate::error::{Error, Result};
use crate::volume::{Coord, MultiChannelCase};

/// Default patch edge length.
pub const DEFAULT_PATCH: usize = 11;

pub fn check_patch_size(p: usize) -> Result<()> {
    if p % 2 == 0 {
        Err(Error::EvenPatchSize(p))
    } else {
        Ok(())
    }
}

/// Writes the patch centered on `coord` into `out` (length `c * p^3`).
/// Positions outside the volume are zero.
pub fn extract_patch_into(case: &MultiChannelCase, coord: Coord, p: usize, out: &mut [f32]) -> Result<()> {
    check_patch_size(p)?;
    let dims = case.dims();
    if !dims.contains(coord) {
        return Err(Error::CoordOutOfVolume { coord, dims: dims.as_array() });
    }
    let c = case.channels().len();
    if out.len() != c * p * p * p {
        return Err(Error::shape(format!("patch buffer has {} values, need {}", out.len(), c * p * p * p)));
    }
    let h = (p / 2) as isize;
    let n = [dims.nx as isize, dims.ny as isize, dims.nz as isize];
    let origin = [coord[0] as isize - h, coord[1] as isize - h, coord[2] as isize - h];
    // in-bounds x range of the window, relative to the patch
    let x_lo = (-origin[0]).max(0) as usize;
    let x_hi = ((n[0] - origin[0]).min(p as isize)).max(0) as usize;
    for (ci, (_, vol)) in case.channels().iter().enumerate() {
        let data = vol.data();
        let chan = &mut out[ci * p * p * p..(ci + 1) * p * p * p];
        for dz in 0..p {
            let z = origin[2] + dz as isize;
            for dy in 0..p {
                let y = origin[1] + dy as isize;
                let row = &mut chan[(dz * p + dy) * p..(dz * p + dy + 1) * p];
                if z < 0 || z >= n[2] || y < 0 || y >= n[1] || x_lo >= x_hi {
                    row.fill(0.0);
                    continue;
                }
                row[..x_lo].fill(0.0);
                row[x_hi..].fill(0.0);
                let base = (z * n[1] + y) * n[0] + origin[0];
                let start = (base + x_lo as isize) as usize;
                row[x_lo..x_hi].copy_from_slice(&data[start..start + (x_hi - x_lo)]);
            }
        }
    }
    Ok(())
}

pub fn extract_patch(case: &MultiChannelCase, coord: Coord, p: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; case.channels().len() * p * p * p];
    extract_patch_into(case, coord, p, &mut out)?;
    Ok(out)
}

/// Stacks patches for `coords` into one contiguous `[n, c, p, p, p]` array.
pub fn extract_patches(case: &MultiChannelCase, coords: &[Coord], p: usize) -> Result<Vec<f32>> {
    check_patch_size(p)?;
    let size = case.channels().len() * p * p * p;
    let mut out = vec![0.0; coords.len() * size];
    for (chunk, &coord) in out.chunks_exact_mut(size).zip(coords) {
        extract_patch_into(case, coord, p, chunk)?;
    }
    Ok(out)
}

/// Stacked training patches with labels and their source voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    p: usize,
    channels: usize,
    patches: Vec<f32>,
    labels: Vec<u8>,
    coords: Vec<Coord>,
    /// Index of the source case for each patch.
    cases: Vec<u32>,
}

impl PatchSet {
    pub fn empty(channels: usize, p: usize) -> Result<Self> {
        check_patch_size(p)?;
        Ok(PatchSet { p, channels, patches: vec![], labels: vec![], coords: vec![], cases: vec![] })
    }

    pub fn from_parts(
        channels: usize,
        p: usize,
        patches: Vec<f32>,
        labels: Vec<u8>,
        coords: Vec<Coord>,
        cases: Vec<u32>,
    ) -> Result<Self> {
        check_patch_size(p)?;
        let n = labels.len();
        if coords.len() != n || cases.len() != n || patches.len() != n * channels * p * p * p {
            return Err(Error::shape("patch set parts disagree on sample count"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::shape("labels must be 0 or 1"));
        }
        Ok(PatchSet { p, channels, patches, labels, coords, cases })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.p
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Scalars per patch, `c * p^3`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.p * self.p * self.p
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.len(), self.channels, self.p, self.p, self.p]
    }

    pub fn patches(&self) -> &[f32] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let s = self.patch_len();
        &self.patches[i * s..(i + 1) * s]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn case_indices(&self) -> &[u32] {
        &self.cases
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Appends every patch of `other`, which must share channels and p.
    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if other.p != self.p || other.channels != self.channels {
            return Err(Error::shape("cannot merge patch sets of different geometry"));
        }
        self.patches.extend(other.patches);
        self.labels.extend(other.labels);
        self.coords.extend(other.coords);
        self.cases.extend(other.cases);
        Ok(())
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> PatchSet {
        let s = self.patch_len();
        let mut patches = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            patches.extend_from_slice(self.patch(i));
        }
        PatchSet {
            p: self.p,
            channels: self.channels,
            patches,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            cases: indices.iter().map(|&i| self.cases[i]).collect(),
        }
    }
}

/// Builds the labeled patch set for `coords` of one case; labels come from
/// the case mask.
pub fn build_patchset(case: &MultiChannelCase, coords: &[Coord], p: usize) -> Result<PatchSet> {
    build_patchset_for_case(case, 0, coords, p)
}

/// As [`build_patchset`], tagging every patch with `case_index`.
pub fn build_patchset_for_case(
    case: &MultiChannelCase,
    case_index: u32,
    coords: &[Coord],
    p: usize,
) -> Result<PatchSet> {
    let mask = case.require_mask()?;
    let patches = extract_patches(case, coords, p)?;
    let labels = coords.iter().map(|&c| mask.get(c) as u8).collect();
    PatchSet::from_parts(
        case.channels().len(),
        p,
        patches,
        labels,
        coords.to_vec(),
        vec![case_index; coords.len()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{BinaryMask, Dims, Volume};
    use proptest::prelude::*;

    fn ramp_case(dims: Dims, channels: usize) -> MultiChannelCase {
        let chans = (0..channels)
            .map(|c| {
                let data = (0..dims.len()).map(|i| (i + 1000 * c) as f32 + 1.0).collect();
                (format!("C{c}"), Volume::new(dims, [1.0; 3], data).unwrap())
            })
            .collect();
        let mask = BinaryMask::from_fn(dims, [1.0; 3], |i| i % 7 == 0).unwrap();
        MultiChannelCase::new("ramp", chans, Some(mask)).unwrap()
    }

    /// Triple-loop window copy used as the oracle.
    fn brute_force(case: &MultiChannelCase, coord: Coord, p: usize) -> Vec<f32> {
        let d = case.dims();
        let h = (p / 2) as isize;
        let mut out = vec![];
        for (_, v) in case.channels() {
            for dz in 0..p as isize {
                for dy in 0..p as isize {
                    for dx in 0..p as isize {
                        let x = coord[0] as isize + dx - h;
                        let y = coord[1] as isize + dy - h;
                        let z = coord[2] as isize + dz - h;
                        let inside = x >= 0 && y >= 0 && z >= 0
                            && (x as usize) < d.nx && (y as usize) < d.ny && (z as usize) < d.nz;
                        out.push(if inside { v.get([x as usize, y as usize, z as usize]) } else { 0.0 });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn centered_patch_is_whole_volume() {
        let case = ramp_case(Dims::cube(11), 2);
        let patch = extract_patch(&case, [5, 5, 5], 11).unwrap();
        let whole: Vec<f32> = case.channels().iter().flat_map(|(_, v)| v.data().to_vec()).collect();
        assert_eq!(patch, whole);
    }

    #[test]
    fn corner_patch_zero_padding_count() {
        // Oracle: positions with any coordinate offset -1 at the corner are
        // outside; 27 - 2^3 = 19 per channel.
        let case = ramp_case(Dims::cube(5), 2);
        let patch = extract_patch(&case, [0, 0, 0], 3).unwrap();
        let expected_outside = (0..27)
            .filter(|i| {
                let (dx, dy, dz) = (i % 3, (i / 3) % 3, i / 9);
                dx == 0 || dy == 0 || dz == 0
            })
            .count();
        assert_eq!(expected_outside, 19);
        for ch in patch.chunks(27) {
            assert_eq!(ch.iter().filter(|&&v| v == 0.0).count(), 19);
        }
    }

    #[test]
    fn even_patch_size_rejected() {
        let case = ramp_case(Dims::cube(5), 1);
        assert!(matches!(extract_patch(&case, [0, 0, 0], 4), Err(Error::EvenPatchSize(4))));
    }

    #[test]
    fn out_of_volume_coord_rejected() {
        let case = ramp_case(Dims::cube(5), 1);
        assert!(matches!(extract_patch(&case, [5, 0, 0], 3), Err(Error::CoordOutOfVolume { .. })));
    }

    #[test]
    fn patchset_shape_and_labels() {
        let case = ramp_case(Dims::cube(12), 2);
        let coords = vec![[0, 0, 0], [3, 4, 5], [11, 11, 11]];
        let ps = build_patchset(&case, &coords, 11).unwrap();
        assert_eq!(ps.shape(), [3, 2, 11, 11, 11]);
        assert_eq!(ps.patches().len(), 3 * 2 * 1331);
        // index 0 is a multiple of 7, so mask-1
        assert_eq!(ps.labels()[0], 1);
        let empty = build_patchset(&case, &[], 11).unwrap();
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn patchset_requires_mask() {
        let case = ramp_case(Dims::cube(4), 1).with_mask(None).unwrap();
        assert!(matches!(build_patchset(&case, &[[0, 0, 0]], 3), Err(Error::MissingMask(_))));
    }

    proptest! {
        #[test]
        fn patch_equals_brute_force_window(
            x in 0usize..9, y in 0usize..8, z in 0usize..7, half in 0usize..4,
        ) {
            let case = ramp_case(Dims::new(9, 8, 7), 2);
            let p = 2 * half + 1;
            prop_assert_eq!(extract_patch(&case, [x, y, z], p).unwrap(), brute_force(&case, [x, y, z], p));
        }

        #[test]
        fn label_sum_matches_mask(coords in proptest::collection::vec((0usize..6, 0usize..6, 0usize..6), 0..40)) {
            let case = ramp_case(Dims::cube(6), 1);
            let coords: Vec<Coord> = coords.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let ps = build_patchset(&case, &coords, 3).unwrap();
            let expected = coords.iter().filter(|&&c| case.mask().unwrap().get(c)).count();
            prop_assert_eq!(ps.positives(), expected);
        }
    }
}
