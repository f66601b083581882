//! Multi-modal intensity volumes, label volumes and the preprocessing
//! steps applied before clustering: brain crop, percentile rescale,
//! z-normalization and centered padding.
//!
//! Grids are stored with `x` fastest: the flat index of `(z, y, x)` is
//! `(z * H + y) * W + x` for dims `[D, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub type Dims = [usize; 3];

/// Number of modalities carried by every volume.
pub const N_MODALITIES: usize = 4;

/// Number of segmentation classes (background plus three tumor classes).
pub const N_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; N_MODALITIES] =
        [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn flat_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[inline]
pub fn unflatten(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z, y, x]
}

/// Copies the box `[offset, offset + size)` out of a grid.
fn crop_grid<T: Copy>(src: &[T], dims: Dims, offset: [usize; 3], size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = flat_index(dims, z + offset[0], y + offset[1], offset[2]);
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    out
}

/// Places `src` at `offset` inside a grid of `target` filled with `fill`.
fn embed_grid<T: Copy>(src: &[T], dims: Dims, target: Dims, offset: [usize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; voxel_count(target)];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let from = flat_index(dims, z, y, 0);
            let to = flat_index(target, z + offset[0], y + offset[1], offset[2]);
            out[to..to + dims[2]].copy_from_slice(&src[from..from + dims[2]]);
        }
    }
    out
}

/// Four co-registered intensity channels (T1, T1CE, T2, FLAIR) on one grid.
///
/// `mask` marks brain voxels: those with a nonzero raw intensity in any
/// channel. It is fixed at construction and carried through every
/// preprocessing step so later stages never have to guess brain support
/// from normalized values.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    channels: [Vec<f64>; N_MODALITIES],
    mask: Vec<bool>,
}

impl MultiModalVolume {
    /// Builds a volume from raw (non-negative) channels; the brain mask is
    /// the union of nonzero voxels.
    pub fn new(dims: Dims, spacing: [f64; 3], channels: [Vec<f64>; N_MODALITIES]) -> Result<Self> {
        let n = voxel_count(dims);
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension(format!(
                "every channel must hold {n} voxels for dims {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter(format!("spacing must be positive, got {spacing:?}")));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "volume intensities".into(),
            });
        }
        let mask = (0..n).map(|i| channels.iter().any(|c| c[i] != 0.0)).collect();
        Ok(Self {
            dims,
            spacing,
            origin: [0.0; 3],
            channels,
            mask,
        })
    }

    /// Builds a volume with an explicit brain mask (used when reloading
    /// already normalized data).
    pub fn with_mask(
        dims: Dims,
        spacing: [f64; 3],
        channels: [Vec<f64>; N_MODALITIES],
        mask: Vec<bool>,
    ) -> Result<Self> {
        let mut v = Self::new(dims, spacing, channels)?;
        if mask.len() != v.mask.len() {
            return Err(Error::Dimension("mask length differs from grid".into()));
        }
        v.mask = mask;
        Ok(v)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn channel(&self, m: Modality) -> &[f64] {
        &self.channels[m.index()]
    }

    pub fn channels(&self) -> &[Vec<f64>; N_MODALITIES] {
        &self.channels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn brain_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// The four intensities at flat index `i`.
    #[inline]
    pub fn intensities(&self, i: usize) -> [f64; N_MODALITIES] {
        [
            self.channels[0][i],
            self.channels[1][i],
            self.channels[2][i],
            self.channels[3][i],
        ]
    }

    /// Tight bounding box of the brain mask. Returns the cropped volume and
    /// the `(z, y, x)` offset of its first voxel in the source grid.
    pub fn crop_to_brain(&self) -> Result<(Self, [usize; 3])> {
        let (lo, hi) = bounding_box(&self.mask, self.dims).ok_or(Error::EmptyBrain)?;
        let size = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let channels = self
            .channels
            .clone()
            .map(|c| crop_grid(&c, self.dims, lo, size));
        let mask = crop_grid(&self.mask, self.dims, lo, size);
        let origin = std::array::from_fn(|a| self.origin[a] + lo[a] as f64 * self.spacing[a]);
        Ok((
            Self {
                dims: size,
                spacing: self.spacing,
                origin,
                channels,
                mask,
            },
            lo,
        ))
    }

    /// Divides each channel by the `p`-th percentile of its brain-voxel
    /// nonzero intensities and clips to `[0, 1]`.
    pub fn rescale_percentile(&self, p: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::Parameter(format!("percentile {p} outside [0, 100]")));
        }
        let mut out = self.clone();
        for (ci, channel) in out.channels.iter_mut().enumerate() {
            let support: Vec<f64> = channel
                .iter()
                .zip(&self.mask)
                .filter(|(v, m)| **m && **v != 0.0)
                .map(|(v, _)| *v)
                .collect();
            let reference = stats::percentiles(&support, &[p])
                .map(|v| v[0])
                .unwrap_or(0.0);
            if reference == 0.0 {
                return Err(Error::DegenerateChannel { channel: ci });
            }
            for v in channel.iter_mut() {
                *v = (*v / reference).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    /// Per-channel zero mean, unit (population) variance over brain voxels.
    /// Voxels outside the mask stay at zero; a constant channel maps to
    /// all zeros.
    pub fn znormalize(&self) -> Self {
        let mut out = self.clone();
        let count = self.brain_voxels();
        if count == 0 {
            return out;
        }
        for channel in out.channels.iter_mut() {
            let support = || channel.iter().zip(&self.mask).filter(|(_, m)| **m).map(|(v, _)| *v);
            let mean = support().sum::<f64>() / count as f64;
            let var = support().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            let std = var.sqrt();
            let constant = support().all(|v| v == mean) || std == 0.0;
            for (v, &m) in channel.iter_mut().zip(&self.mask) {
                *v = if !m || constant { 0.0 } else { (*v - mean) / std };
            }
        }
        out
    }

    /// Zero-pads symmetrically (extra voxel on the high side when odd) to
    /// `target`. Returns the padded volume and the offset of the original
    /// content inside it.
    pub fn pad_to_shape(&self, target: Dims) -> Result<(Self, [usize; 3])> {
        let offset = centered_offset(self.dims, target)?;
        let channels = self
            .channels
            .clone()
            .map(|c| embed_grid(&c, self.dims, target, offset, 0.0));
        let mask = embed_grid(&self.mask, self.dims, target, offset, false);
        let origin = std::array::from_fn(|a| self.origin[a] - offset[a] as f64 * self.spacing[a]);
        Ok((
            Self {
                dims: target,
                spacing: self.spacing,
                origin,
                channels,
                mask,
            },
            offset,
        ))
    }
}

pub(crate) fn centered_offset(dims: Dims, target: Dims) -> Result<[usize; 3]> {
    if (0..3).any(|a| target[a] < dims[a]) {
        return Err(Error::Dimension(format!(
            "cannot pad {dims:?} down to {target:?}"
        )));
    }
    Ok(std::array::from_fn(|a| (target[a] - dims[a]) / 2))
}

/// Inclusive `(lo, hi)` corners of the set voxels, or `None` if none are set.
pub fn bounding_box(mask: &[bool], dims: Dims) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        any = true;
        let p = unflatten(dims, i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    any.then_some((lo, hi))
}

/// Per-voxel class ids: 0 background, 1 necrotic core, 2 edema,
/// 3 enhancing tumor.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::Dimension(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::Contract(format!("label {bad} outside 0..=3")));
        }
        Ok(Self {
            dims,
            spacing,
            origin: [0.0; 3],
            labels,
        })
    }

    /// Accepts the stored convention where enhancing tumor is 4 and maps it
    /// to the dense id 3.
    pub fn from_brats(dims: Dims, spacing: [f64; 3], mut labels: Vec<u8>) -> Result<Self> {
        for l in labels.iter_mut() {
            if *l == 4 {
                *l = 3;
            }
        }
        Self::new(dims, spacing, labels)
    }

    pub fn background(dims: Dims, spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            origin: [0.0; 3],
            labels: vec![0; voxel_count(dims)],
        }
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn crop(&self, offset: [usize; 3], size: Dims) -> Result<Self> {
        if (0..3).any(|a| offset[a] + size[a] > self.dims[a]) {
            return Err(Error::Dimension(format!(
                "crop {size:?} at {offset:?} exceeds {:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: size,
            spacing: self.spacing,
            origin: std::array::from_fn(|a| self.origin[a] + offset[a] as f64 * self.spacing[a]),
            labels: crop_grid(&self.labels, self.dims, offset, size),
        })
    }

    /// Inverse of [`crop`](Self::crop): embeds into a background grid.
    pub fn uncrop(&self, offset: [usize; 3], full: Dims) -> Result<Self> {
        if (0..3).any(|a| offset[a] + self.dims[a] > full[a]) {
            return Err(Error::Dimension(format!(
                "{:?} at {offset:?} does not fit in {full:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: full,
            spacing: self.spacing,
            origin: std::array::from_fn(|a| self.origin[a] - offset[a] as f64 * self.spacing[a]),
            labels: embed_grid(&self.labels, self.dims, full, offset, 0),
        })
    }

    pub fn pad_to_shape(&self, target: Dims) -> Result<(Self, [usize; 3])> {
        let offset = centered_offset(self.dims, target)?;
        Ok((self.uncrop(offset, target)?, offset))
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}
