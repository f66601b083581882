//! Axial PNG overlays of label maps over FLAIR.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Modality, MultiModalVolume};

pub const EDEMA_RGB: [u8; 3] = [255, 0, 0];
pub const ENHANCING_RGB: [u8; 3] = [255, 255, 0];
pub const NECROSIS_RGB: [u8; 3] = [0, 0, 255];

/// Opacity of label colours over the grayscale background.
pub const ALPHA: f64 = 0.6;

pub fn label_color(label: u8) -> Option<[u8; 3]> {
    match label {
        1 => Some(NECROSIS_RGB),
        2 => Some(EDEMA_RGB),
        3 => Some(ENHANCING_RGB),
        _ => None,
    }
}

/// Axial slice with the most tumor voxels; the lowest index on ties and
/// the middle slice when there is no tumor.
pub fn largest_cross_section(labels: &LabelVolume) -> usize {
    let [d, h, w] = labels.dims();
    let counts: Vec<usize> = labels
        .labels()
        .chunks(h * w)
        .map(|s| s.iter().filter(|&&l| l != 0).count())
        .collect();
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return d / 2;
    }
    counts.iter().position(|&c| c == best).expect("max is present")
}

pub fn render_slice(volume: &MultiModalVolume, labels: &LabelVolume, z: usize) -> Result<RgbImage> {
    let [d, h, w] = volume.dims();
    if labels.dims() != volume.dims() {
        return Err(Error::Dimension(format!(
            "labels {:?} do not match volume {:?}",
            labels.dims(),
            volume.dims()
        )));
    }
    if z >= d {
        return Err(Error::Dimension(format!("slice {z} outside depth {d}")));
    }
    let flair = &volume.channel(Modality::Flair)[z * h * w..(z + 1) * h * w];
    let lab = &labels.labels()[z * h * w..(z + 1) * h * w];
    let (lo, hi) = flair
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = ((flair[i] - lo) / range).clamp(0.0, 1.0) * 255.0;
            let px = match label_color(lab[i]) {
                Some(c) => c.map(|c| (ALPHA * c as f64 + (1.0 - ALPHA) * g).round() as u8),
                None => [g.round() as u8; 3],
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Renders the largest tumor cross-section of `labels` and writes a PNG.
/// Returns the slice index.
pub fn write_overlay(path: &Path, volume: &MultiModalVolume, labels: &LabelVolume) -> Result<usize> {
    let z = largest_cross_section(labels);
    let img = render_slice(volume, labels, z)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(z)
}
