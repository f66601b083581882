//! Voxel-level overlap and surface-distance metrics over the composite
//! tumor regions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_sorted;
use crate::volume::{Dims, LabelVolume, N_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    pub fn classes(self) -> &'static [u8] {
        match self {
            Region::WT => &[1, 2, 3],
            Region::TC => &[1, 3],
            Region::ET => &[3],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.classes().contains(&label)
    }

    pub fn mask(self, labels: &[u8]) -> Vec<bool> {
        labels.iter().map(|&l| self.contains(l)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!("mask sizes {} and {} differ", pred.len(), gt.len())));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dice())
}

/// One-dimensional squared distance transform over samples placed `step`
/// apart (lower envelope of parabolas). `f` holds input costs, infinite
/// where there is no site; the result overwrites `f`.
fn edt_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * step;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * step;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let xq = q as f64 * step;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        // Boundary ties can leave the neighbouring parabola marginally lower.
        let mut best = f64::INFINITY;
        for &p in &v[k.saturating_sub(1)..(k + 2).min(v.len())] {
            let d = (q as f64 - p as f64) * step;
            best = best.min(d * d + f[p]);
        }
        out.push(best);
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel, with per-axis spacing `[dz, dy, dx]`. All entries are
/// infinite when the mask is empty.
pub fn squared_distance_transform(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    // x, then y, then z.
    for row in g.chunks_mut(w) {
        edt_1d(row, spacing[2], &mut v, &mut z, &mut out);
    }
    for zi in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| g[(zi * h + y) * w + x]));
            edt_1d(&mut line, spacing[1], &mut v, &mut z, &mut out);
            for (y, &val) in line.iter().enumerate() {
                g[(zi * h + y) * w + x] = val;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|zi| g[(zi * h + y) * w + x]));
            edt_1d(&mut line, spacing[0], &mut v, &mut z, &mut out);
            for (zi, &val) in line.iter().enumerate() {
                g[(zi * h + y) * w + x] = val;
            }
        }
    }
    g
}

/// Distances (mm) from each voxel of `from` to the nearest voxel of `to`.
fn directed_distances(from: &[bool], to_edt: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_edt)
        .filter(|(&m, _)| m)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// 95th percentile of the concatenated bidirectional voxel-to-nearest-voxel
/// distances. `Some(0.0)` when both masks are empty, `None` when exactly one is.
pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims, spacing: [f64; 3]) -> Result<Option<f64>> {
    let n = dims.iter().product::<usize>();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Contract(format!(
            "mask sizes {} and {} do not match grid {dims:?}",
            pred.len(),
            gt.len()
        )));
    }
    let (any_p, any_g) = (pred.iter().any(|&b| b), gt.iter().any(|&b| b));
    match (any_p, any_g) {
        (false, false) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let to_gt = squared_distance_transform(gt, dims, spacing);
    let to_pred = squared_distance_transform(pred, dims, spacing);
    let mut all = directed_distances(pred, &to_gt);
    all.extend(directed_distances(gt, &to_pred));
    all.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&all, 95.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: Region,
    pub dice: f64,
    /// `None` when exactly one of the two masks is empty.
    pub hd95: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCounts {
    pub label: [usize; N_CLASSES],
    pub predicted: [usize; N_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case: String,
    pub regions: Vec<RegionScore>,
    pub voxel_counts: NodeCounts,
    pub node_counts: Option<NodeCounts>,
}

impl EvalReport {
    pub fn region(&self, r: Region) -> &RegionScore {
        self.regions.iter().find(|s| s.region == r).expect("all regions present")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub const CSV_HEADER: &'static str = "case,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et";

    pub fn csv_row(&self) -> String {
        let mut cells = vec![self.case.clone()];
        cells.extend(Region::ALL.iter().map(|&r| self.region(r).dice.to_string()));
        cells.extend(
            Region::ALL
                .iter()
                .map(|&r| self.region(r).hd95.map_or_else(|| "NA".to_string(), |h| h.to_string())),
        );
        cells.join(",")
    }
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<EvalReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Contract(format!(
            "prediction dims {:?} differ from ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let regions = Region::ALL
        .iter()
        .map(|&r| {
            let p = r.mask(pred.labels());
            let g = r.mask(gt.labels());
            let confusion = Confusion::of(&p, &g)?;
            Ok(RegionScore {
                region: r,
                dice: confusion.dice(),
                hd95: hd95(&p, &g, pred.dims(), spacing)?,
                confusion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        case: String::new(),
        regions,
        voxel_counts: NodeCounts {
            label: gt.class_counts(),
            predicted: pred.class_counts(),
        },
        node_counts: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub dice_mean: f64,
    pub dice_median: f64,
    /// Over cases where HD95 is defined.
    pub hd95_mean: Option<f64>,
    pub hd95_median: Option<f64>,
    pub hd95_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub regions: Vec<RegionSummary>,
}

fn mean_median(values: &mut [f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Some((mean, percentile_sorted(values, 50.0)?))
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to aggregate".into()));
    }
    let regions = Region::ALL
        .iter()
        .map(|&r| {
            let mut dice: Vec<f64> = reports.iter().map(|e| e.region(r).dice).collect();
            let mut hd: Vec<f64> = reports.iter().filter_map(|e| e.region(r).hd95).collect();
            let (dice_mean, dice_median) = mean_median(&mut dice).expect("nonempty");
            let hd_stats = mean_median(&mut hd);
            RegionSummary {
                region: r,
                dice_mean,
                dice_median,
                hd95_mean: hd_stats.map(|s| s.0),
                hd95_median: hd_stats.map(|s| s.1),
                hd95_undefined: reports.len() - hd.len(),
            }
        })
        .collect();
    Ok(Summary {
        cases: reports.len(),
        regions,
    })
}

impl Summary {
    /// Two rows (dice, HD95) by three region columns, each cell `mean / median`.
    pub fn write_table(&self, mut w: impl Write) -> std::io::Result<()> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        writeln!(w, "metric,WT,TC,ET")?;
        write!(w, "dice")?;
        for r in &self.regions {
            write!(w, ",{:.4} / {:.4}", r.dice_mean, r.dice_median)?;
        }
        writeln!(w)?;
        write!(w, "hd95")?;
        for r in &self.regions {
            write!(w, ",{} / {}", fmt(r.hd95_mean), fmt(r.hd95_median))?;
        }
        writeln!(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for &[z, y, x] in on {
            m[(z * dims[1] + y) * dims[2] + x] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        let c = Confusion { tp: 3, fp: 1, fn_: 2 };
        assert!((c.dice() - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn hd95_examples() {
        let dims = [1, 1, 8];
        let a = mask(dims, &[[0, 0, 1]]);
        let b = mask(dims, &[[0, 0, 6]]);
        assert_eq!(hd95(&a, &a, dims, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &b, dims, [1.0, 1.0, 2.0]).unwrap(), Some(10.0));
        let empty = vec![false; 8];
        assert_eq!(hd95(&empty, &empty, dims, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &empty, dims, [1.0; 3]).unwrap(), None);
        assert!(hd95(&a, &b[..4], dims, [1.0; 3]).is_err());
    }

    #[test]
    fn edt_anisotropic_diagonal() {
        let dims = [3, 3, 3];
        let m = mask(dims, &[[0, 0, 0]]);
        let d = squared_distance_transform(&m, dims, [2.0, 3.0, 0.5]);
        assert_eq!(d[(2 * 3 + 2) * 3 + 1], 16.0 + 36.0 + 0.25);
        assert!(squared_distance_transform(&[false; 8], [2, 2, 2], [1.0; 3])
            .iter()
            .all(|v| v.is_infinite()));
    }

    #[test]
    fn evaluate_identity_and_empty() {
        let dims = [2, 3, 3];
        let labels: Vec<u8> = (0..18).map(|i| (i % 4) as u8).collect();
        let gt = LabelVolume::new(dims, [1.0; 3], labels).unwrap();
        let r = evaluate(&gt, &gt, [1.0; 3]).unwrap();
        for s in &r.regions {
            assert_eq!((s.dice, s.hd95), (1.0, Some(0.0)));
        }
        let bg = LabelVolume::background(dims, [1.0; 3]);
        let r = evaluate(&bg, &gt, [1.0; 3]).unwrap();
        for s in &r.regions {
            assert_eq!((s.dice, s.hd95), (0.0, None));
        }
        assert!(r.csv_row().ends_with("NA,NA,NA"));
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn region_nesting() {
        for l in 0..4u8 {
            assert!(!Region::ET.contains(l) || Region::TC.contains(l));
            assert!(!Region::TC.contains(l) || Region::WT.contains(l));
        }
    }

    #[test]
    fn summary_table() {
        let dims = [1, 1, 4];
        let gt = LabelVolume::new(dims, [1.0; 3], vec![0, 1, 2, 3]).unwrap();
        let r = evaluate(&gt, &gt, [1.0; 3]).unwrap();
        let s = aggregate(&[r.clone(), r]).unwrap();
        let mut out = Vec::new();
        s.write_table(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("metric,WT,TC,ET\ndice,1.0000 / 1.0000"));
    }
}
