//! Synthetic labelled multi-modal volumes with nested ellipsoid tumors.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::VxgFile;
use crate::volume::{voxel_count, Dims, LabelVolume, MultiModalVolume, N_CLASSES, N_MODALITIES};

/// Smallest extent accepted on any axis.
pub const MIN_EXTENT: usize = 16;

/// Brain semi-axes as a fraction of the grid extent.
const BRAIN_FRACTION: f64 = 0.42;

/// Intensities inside the brain never drop below this, so the brain mask
/// (nonzero in any channel) is exactly the brain ellipsoid.
const INTENSITY_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Dims,
    pub count: usize,
    /// Tumors per volume.
    pub tumors: usize,
    /// Edema semi-axis range in voxels.
    pub edema_radius: [f64; 2],
    /// Enhancing-rim semi-axes as a fraction of the edema semi-axes.
    pub enhancing_ratio: f64,
    /// Necrotic-core semi-axes as a fraction of the edema semi-axes.
    pub necrosis_ratio: f64,
    /// Mean intensity per class (rows) and modality (columns, T1, T1CE, T2, FLAIR).
    pub intensities: [[f64; N_MODALITIES]; N_CLASSES],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            count: 1,
            tumors: 1,
            edema_radius: [5.0, 8.0],
            enhancing_ratio: 0.6,
            necrosis_ratio: 0.3,
            intensities: [
                [0.60, 0.60, 0.50, 0.45],
                [0.30, 0.25, 0.90, 0.50],
                [0.50, 0.55, 0.80, 0.95],
                [0.45, 1.00, 0.70, 0.70],
            ],
            noise: 0.03,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            center: self.center,
            radii: self.radii.map(|r| r * f),
        }
    }
}

/// One tumor: edema shell, enhancing rim and necrotic core share a centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tumor {
    pub edema: Ellipsoid,
    pub enhancing: Ellipsoid,
    pub necrosis: Ellipsoid,
}

impl Tumor {
    /// Innermost class whose ellipsoid contains `p`.
    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        if self.necrosis.contains(p) {
            1
        } else if self.enhancing.contains(p) {
            3
        } else if self.edema.contains(p) {
            2
        } else {
            0
        }
    }
}

fn priority(label: u8) -> u8 {
    match label {
        1 => 3,
        3 => 2,
        2 => 1,
        _ => 0,
    }
}

impl PhantomSpec {
    pub fn brain(&self) -> Ellipsoid {
        Ellipsoid {
            center: self.shape.map(|n| (n as f64 - 1.0) / 2.0),
            radii: self.shape.map(|n| n as f64 * BRAIN_FRACTION),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < MIN_EXTENT) {
            return Err(Error::Parameter(format!(
                "phantom shape {:?} below {MIN_EXTENT}^3",
                self.shape
            )));
        }
        let [lo, hi] = self.edema_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Parameter(format!("invalid edema radius range {lo}..{hi}")));
        }
        let room = self.brain().radii.iter().cloned().fold(f64::INFINITY, f64::min);
        if hi > room {
            return Err(Error::Parameter(format!(
                "edema radius {hi} does not fit inside the brain (max {room:.2}) for shape {:?}",
                self.shape
            )));
        }
        if !(0.0 < self.necrosis_ratio && self.necrosis_ratio < self.enhancing_ratio && self.enhancing_ratio < 1.0) {
            return Err(Error::Parameter(
                "ratios must satisfy 0 < necrosis < enhancing < 1".into(),
            ));
        }
        if !(self.noise >= 0.0) || self.intensities.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Parameter("noise must be ≥ 0 and intensities > 0".into()));
        }
        Ok(())
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Tumor geometry of volume `index`, drawn so every edema ellipsoid lies
    /// inside the brain ellipsoid.
    pub fn tumors_for(&self, index: usize) -> Vec<Tumor> {
        let mut rng = self.rng_for(index);
        let brain = self.brain();
        (0..self.tumors)
            .map(|_| {
                let radii: [f64; 3] =
                    std::array::from_fn(|_| rng.gen_range(self.edema_radius[0]..=self.edema_radius[1]));
                // Keeping |offset_a| / (R_a − r_a) within 1/√3 bounds the
                // shell inside the brain.
                let center: [f64; 3] = std::array::from_fn(|a| {
                    let slack = (brain.radii[a] - radii[a]).max(0.0) / 3f64.sqrt();
                    brain.center[a] + rng.gen_range(-1.0..=1.0) * slack
                });
                let edema = Ellipsoid { center, radii };
                Tumor {
                    edema,
                    enhancing: edema.scaled(self.enhancing_ratio),
                    necrosis: edema.scaled(self.necrosis_ratio),
                }
            })
            .collect()
    }

    pub fn generate_one(&self, index: usize) -> Result<(MultiModalVolume, LabelVolume)> {
        self.validate()?;
        let tumors = self.tumors_for(index);
        let mut rng = self.rng_for(index);
        // Skip past the geometry draws so noise is independent of them.
        rng.set_word_pos(1 << 20);
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Parameter(e.to_string()))?;
        let brain = self.brain();
        let dims = self.shape;
        let n = voxel_count(dims);
        let mut labels = vec![0u8; n];
        let mut channels: [Vec<f64>; N_MODALITIES] = std::array::from_fn(|_| vec![0.0; n]);
        let [_, h, w] = dims;
        for i in 0..n {
            let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
            if !brain.contains(p) {
                continue;
            }
            let label = tumors
                .iter()
                .map(|t| t.label_at(p))
                .max_by_key(|&l| priority(l))
                .unwrap_or(0);
            labels[i] = label;
            for (m, ch) in channels.iter_mut().enumerate() {
                let noise = if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                ch[i] = (self.intensities[label as usize][m] + noise).max(INTENSITY_FLOOR);
            }
        }
        let volume = MultiModalVolume::new(dims, [1.0; 3], channels)?;
        let labels = LabelVolume::new(dims, [1.0; 3], labels)?;
        Ok((volume, labels))
    }

    pub fn generate(&self) -> Result<Vec<(MultiModalVolume, LabelVolume)>> {
        (0..self.count).map(|i| self.generate_one(i)).collect()
    }

    /// Writes `phantom_000.vxg`, `phantom_001.vxg`, ... into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.validate()?;
        (0..self.count)
            .map(|i| {
                let (v, l) = self.generate_one(i)?;
                let path = dir.join(format!("phantom_{i:03}.vxg"));
                VxgFile::from_volume(&v, Some(&l)).write(&path)?;
                Ok(path)
            })
            .collect()
    }
}
