//! Scalar volumes, binary masks and multi-channel cases.
//!
//! All voxel arrays are stored x-fastest: the flat index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use crate::error::{Error, Result};

/// Voxel coordinate `[x, y, z]`.
pub type Coord = [usize; 3];

/// Name of the channel used for candidate filtering.
pub const FLAIR: &str = "FLAIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { nx: n, ny: n, nz: n }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, c: Coord) -> usize {
        c[0] + self.nx * (c[1] + self.ny * c[2])
    }

    #[inline]
    pub fn coord(&self, index: usize) -> Coord {
        let x = index % self.nx;
        let y = (index / self.nx) % self.ny;
        let z = index / (self.nx * self.ny);
        [x, y, z]
    }

    pub fn contains(&self, c: Coord) -> bool {
        c[0] < self.nx && c[1] < self.ny && c[2] < self.nz
    }

    /// Checks the dims are positive and the voxel count fits in 2^31.
    pub fn validate(&self) -> Result<()> {
        let d = [self.nx as u64, self.ny as u64, self.nz as u64];
        let count = d[0].checked_mul(d[1]).and_then(|v| v.checked_mul(d[2]));
        match count {
            Some(n) if d.iter().all(|&v| v > 0) && n <= 1 << 31 => Ok(()),
            _ => Err(Error::DimensionOverflow(d)),
        }
    }
}

fn check_voxel_size(voxel_size: [f32; 3]) -> Result<()> {
    if voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidVoxelSize(voxel_size))
    }
}

/// One scalar 3D image channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxel_size: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        check_voxel_size(voxel_size)?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        Ok(Volume { dims, voxel_size, data })
    }

    pub fn zeros(dims: Dims, voxel_size: [f32; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![0.0; dims.len()])
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: Coord) -> f32 {
        self.data[self.dims.index(c)]
    }

    /// Zero-mean, unit-standard-deviation copy of the volume.
    ///
    /// Statistics are taken over every voxel and accumulated in f64. The
    /// standard deviation uses the n-1 (sample) denominator.
    pub fn normalize(&self) -> Result<Volume> {
        let n = self.data.len();
        if n < 2 {
            return Err(Error::DegenerateVolume);
        }
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let ss: f64 = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum();
        let std = (ss / (n - 1) as f64).sqrt();
        if !(std >= 1e-12) {
            return Err(Error::DegenerateVolume);
        }
        let data = self.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
        Ok(Volume { dims: self.dims, voxel_size: self.voxel_size, data })
    }
}

/// Lesion annotation; every value is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    voxel_size: [f32; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: Dims, voxel_size: [f32; 3], data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        check_voxel_size(voxel_size)?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "mask data has {} values, dims {:?} need {}",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::InvalidMaskValue { index, value });
        }
        Ok(BinaryMask { dims, voxel_size, data })
    }

    pub fn zeros(dims: Dims, voxel_size: [f32; 3]) -> Result<Self> {
        Self::new(dims, voxel_size, vec![0; dims.len()])
    }

    /// Builds a mask from a predicate over flat indices.
    pub fn from_fn(dims: Dims, voxel_size: [f32; 3], f: impl Fn(usize) -> bool) -> Result<Self> {
        Self::new(dims, voxel_size, (0..dims.len()).map(|i| f(i) as u8).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: Coord) -> bool {
        self.data[self.dims.index(c)] != 0
    }

    pub fn set(&mut self, c: Coord, value: bool) {
        let i = self.dims.index(c);
        self.data[i] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Volume of one voxel in milliliters.
    pub fn voxel_ml(&self) -> f64 {
        self.voxel_size.iter().map(|&s| s as f64).product::<f64>() / 1000.0
    }
}

/// Aligned channels (and optionally a lesion mask) for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelCase {
    pub case_id: String,
    channels: Vec<(String, Volume)>,
    mask: Option<BinaryMask>,
}

impl MultiChannelCase {
    pub fn new(
        case_id: impl Into<String>,
        channels: Vec<(String, Volume)>,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let Some((_, first)) = channels.first() else {
            return Err(Error::shape(format!("case {case_id} has no channels")));
        };
        let dims = first.dims();
        for (name, v) in &channels {
            if v.dims() != dims {
                return Err(Error::shape(format!(
                    "channel {name} of case {case_id} has dims {:?}, expected {:?}",
                    v.dims().as_array(),
                    dims.as_array()
                )));
            }
        }
        if let Some(m) = &mask {
            if m.dims() != dims {
                return Err(Error::shape(format!(
                    "mask of case {case_id} has dims {:?}, expected {:?}",
                    m.dims().as_array(),
                    dims.as_array()
                )));
            }
        }
        Ok(MultiChannelCase { case_id, channels, mask })
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].1.dims()
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.channels[0].1.voxel_size()
    }

    pub fn channels(&self) -> &[(String, Volume)] {
        &self.channels
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn channel(&self, name: &str) -> Option<&Volume> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn mask(&self) -> Option<&BinaryMask> {
        self.mask.as_ref()
    }

    pub fn require_mask(&self) -> Result<&BinaryMask> {
        self.mask.as_ref().ok_or_else(|| Error::MissingMask(self.case_id.clone()))
    }

    pub fn with_mask(mut self, mask: Option<BinaryMask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dims() != self.dims() {
                return Err(Error::shape("mask dims differ from channel dims"));
            }
        }
        self.mask = mask;
        Ok(self)
    }

    /// Copy with every channel normalized.
    pub fn normalized(&self) -> Result<MultiChannelCase> {
        let channels = self
            .channels
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.normalize()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiChannelCase { case_id: self.case_id.clone(), channels, mask: self.mask.clone() })
    }

    /// Copy with channels reordered to `order`; fails if any is missing.
    pub fn with_channel_order(&self, order: &[String]) -> Result<MultiChannelCase> {
        let mut channels = Vec::with_capacity(order.len());
        for name in order {
            match self.channel(name) {
                Some(v) => channels.push((name.clone(), v.clone())),
                None => {
                    return Err(Error::ChannelMismatch {
                        expected: order.to_vec(),
                        found: self.channel_names(),
                    })
                }
            }
        }
        Ok(MultiChannelCase { case_id: self.case_id.clone(), channels, mask: self.mask.clone() })
    }
}
