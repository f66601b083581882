//! Volume file formats.
//!
//! `VXG1` is the compact container used for phantoms and intermediate
//! artifacts:
//!
//! ```text
//! "VXG1"            4 bytes magic
//! D, H, W           3 × u32 LE   (z, y, x extents)
//! channels          u32 LE
//! voxels            channels × D·H·W × f32 LE, channel-major
//! labels            optional D·H·W × u8
//! ```
//!
//! NIfTI-1 (`.nii`, `.nii.gz`) is read and written through the `nifti`
//! crate; one file holds one modality.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, LabelVolume, Modality, MultiModalVolume, N_MODALITIES};

pub const VXG_MAGIC: &[u8; 4] = b"VXG1";

/// Little-endian cursor over a byte buffer.
pub(crate) struct ByteReader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Self { kind, buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.kind, format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.kind, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn dims(&mut self) -> Result<Dims> {
        let d = [self.u32()? as usize, self.u32()? as usize, self.u32()? as usize];
        d.iter()
            .try_fold(1usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| self.overflow())?;
        Ok(d)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.kind, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    fn overflow(&self) -> Error {
        Error::format(self.kind, "size overflow")
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_dims(out: &mut Vec<u8>, dims: Dims) {
    for d in dims {
        put_u32(out, d as u32);
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Raw contents of a `VXG1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct VxgFile {
    pub dims: Dims,
    pub channels: Vec<Vec<f32>>,
    pub labels: Option<Vec<u8>>,
}

impl VxgFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = voxel_count(self.dims);
        let mut out = Vec::with_capacity(20 + self.channels.len() * n * 4 + n);
        out.extend_from_slice(VXG_MAGIC);
        put_dims(&mut out, self.dims);
        put_u32(&mut out, self.channels.len() as u32);
        for c in &self.channels {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("VXG1", buf);
        r.magic(VXG_MAGIC)?;
        let dims = r.dims()?;
        let n_channels = r.u32()? as usize;
        let n = voxel_count(dims);
        let channels = (0..n_channels)
            .map(|_| r.f32s(n))
            .collect::<Result<Vec<_>>>()?;
        let labels = match r.remaining() {
            0 => None,
            rem if rem == n => Some(r.take(n)?.to_vec()),
            rem => {
                return Err(Error::format(
                    "VXG1",
                    format!("{rem} trailing bytes, expected 0 or {n} labels"),
                ))
            }
        };
        Ok(Self {
            dims,
            channels,
            labels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn from_volume(volume: &MultiModalVolume, labels: Option<&LabelVolume>) -> Self {
        Self {
            dims: volume.dims(),
            channels: volume
                .channels()
                .iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect(),
            labels: labels.map(|l| l.labels().to_vec()),
        }
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        Self {
            dims: labels.dims(),
            channels: Vec::new(),
            labels: Some(labels.labels().to_vec()),
        }
    }

    /// Interprets the channels as a raw four-modality volume with the given
    /// spacing (the container does not store geometry).
    pub fn volume(&self, spacing: [f64; 3]) -> Result<MultiModalVolume> {
        let channels = self.four_channels()?;
        MultiModalVolume::new(self.dims, spacing, channels)
    }

    /// Like [`volume`](Self::volume) with an explicit brain mask.
    pub fn volume_with_mask(&self, spacing: [f64; 3], mask: Vec<bool>) -> Result<MultiModalVolume> {
        let channels = self.four_channels()?;
        MultiModalVolume::with_mask(self.dims, spacing, channels, mask)
    }

    fn four_channels(&self) -> Result<[Vec<f64>; N_MODALITIES]> {
        if self.channels.len() != N_MODALITIES {
            return Err(Error::format(
                "VXG1",
                format!("expected {N_MODALITIES} channels, found {}", self.channels.len()),
            ));
        }
        Ok(std::array::from_fn(|c| {
            self.channels[c].iter().map(|&v| f64::from(v)).collect()
        }))
    }

    pub fn label_volume(&self, spacing: [f64; 3]) -> Result<Option<LabelVolume>> {
        self.labels
            .as_ref()
            .map(|l| LabelVolume::from_brats(self.dims, spacing, l.clone()))
            .transpose()
    }
}

/// A single NIfTI volume flattened to our `(z, y, x)` layout.
#[derive(Clone, Debug)]
pub struct NiftiVolume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
    pub header: NiftiHeader,
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f64>()?;
    let shape = arr.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(Error::format("NIfTI", format!("expected a 3-D volume, got shape {shape:?}")));
    }
    let (nx, ny, nz) = (shape[0], shape[1], shape[2]);
    let dims = [nz, ny, nx];
    let mut idx = vec![0usize; shape.len()];
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                idx[..3].copy_from_slice(&[x, y, z]);
                data.push(arr[idx.as_slice()]);
            }
        }
    }
    let p = header.pixdim;
    let spacing = [p[3], p[2], p[1]].map(|s| if s > 0.0 { f64::from(s) } else { 1.0 });
    Ok(NiftiVolume {
        dims,
        spacing,
        data,
        header,
    })
}

/// Loads four modality files into one volume. All four must share a grid.
pub fn read_nifti_modalities(paths: [&Path; N_MODALITIES]) -> Result<(MultiModalVolume, NiftiHeader)> {
    let vols = paths
        .iter()
        .map(|p| read_nifti(p))
        .collect::<Result<Vec<_>>>()?;
    let first = &vols[0];
    if vols.iter().any(|v| v.dims != first.dims) {
        return Err(Error::Dimension("modalities have different grids".into()));
    }
    let header = first.header.clone();
    let origin = [header.quatern_z, header.quatern_y, header.quatern_x].map(f64::from);
    let spacing = first.spacing;
    let dims = first.dims;
    let mut it = vols.into_iter().map(|v| v.data.into_iter().map(|x| x.max(0.0)).collect());
    let channels: [Vec<f64>; N_MODALITIES] = std::array::from_fn(|_| it.next().unwrap());
    Ok((MultiModalVolume::new(dims, spacing, channels)?.with_origin(origin), header))
}

/// Conventional per-modality file name inside a case directory.
pub fn modality_path(dir: &Path, case: &str, m: Modality) -> std::path::PathBuf {
    dir.join(format!("{case}_{}.nii.gz", m.file_suffix()))
}

/// Header description of written label maps; enhancing tumor is stored as
/// 3, not the source convention's 4.
pub const LABEL_DESCRIPTION: &str = "labels 0 bg 1 necrosis 2 edema 3 enhancing (source 4)";

/// Writes labels as a `u8` NIfTI, copying geometry from `reference` when
/// given.
pub fn write_nifti_labels(path: &Path, labels: &LabelVolume, reference: Option<&NiftiHeader>) -> Result<()> {
    let [nz, ny, nx] = labels.dims();
    let arr = Array3::from_shape_vec((nx, ny, nz).f(), labels.labels().to_vec())
        .map_err(|e| Error::format("NIfTI", e.to_string()))?;
    let mut header = reference.cloned().unwrap_or_default();
    header.descrip = LABEL_DESCRIPTION.as_bytes().to_vec();
    let s = labels.spacing();
    header.pixdim[1] = s[2] as f32;
    header.pixdim[2] = s[1] as f32;
    header.pixdim[3] = s[0] as f32;
    WriterOptions::new(path).reference_header(&header).write_nifti(&arr)?;
    Ok(())
}

/// Writes one intensity grid as an `f32` NIfTI.
pub fn write_nifti_channel(path: &Path, dims: Dims, spacing: [f64; 3], data: &[f64]) -> Result<()> {
    let [nz, ny, nx] = dims;
    let arr = Array3::from_shape_vec((nx, ny, nz).f(), data.iter().map(|&v| v as f32).collect())
        .map_err(|e| Error::format("NIfTI", e.to_string()))?;
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[2] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[0] as f32;
    WriterOptions::new(path).reference_header(&header).write_nifti(&arr)?;
    Ok(())
}
