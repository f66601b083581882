//! SLIC supervoxels over the joint four-channel intensity and spatial
//! space, plus removal of clusters that fall outside the brain.
//!
//! The distance between a voxel and a centroid combines intensity and
//! position as `sqrt(Di² + (ω/λ)² · Dxyz²)`, where `λ` is the seed grid
//! spacing and `ω` the compactness weight.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{put_dims, put_u32, read_bytes, write_bytes, ByteReader};
use crate::volume::{flat_index, unflatten, voxel_count, Dims, MultiModalVolume};

/// Marker for voxels that belong to no supervoxel.
pub const UNASSIGNED: u32 = u32::MAX;

pub const SVX_MAGIC: &[u8; 4] = b"SVX1";

/// Four mean intensities followed by mean `(z, y, x)` position.
pub type Centroid = [f64; 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    /// Target supervoxel count.
    pub k: usize,
    /// Compactness weight.
    pub omega: f64,
    /// Seed spacing in voxels; `None` derives `cbrt(D·H·W / k)`.
    pub lambda: Option<f64>,
    pub max_iters: usize,
    /// Total centroid movement below which iteration stops; `None` means
    /// `1e-4 · λ`.
    pub tol: Option<f64>,
    pub enforce_connectivity: bool,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            k: 15_000,
            omega: 1.0,
            lambda: None,
            max_iters: 10,
            tol: None,
            enforce_connectivity: true,
        }
    }
}

/// Voxel count of a full-size brain volume, the reference for scaling `k`.
pub const REFERENCE_VOXELS: usize = 240 * 240 * 155;

impl SlicParams {
    /// Default `k` scaled by voxel count relative to a full-size scan.
    pub fn scaled_for(dims: Dims) -> Self {
        let base = Self::default();
        let k = (base.k as f64 * voxel_count(dims) as f64 / REFERENCE_VOXELS as f64).round();
        Self {
            k: (k as usize).max(1),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if !(self.omega > 0.0) {
            return Err(Error::Parameter(format!("omega must be positive, got {}", self.omega)));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::Parameter(format!("lambda must be positive, got {l}")));
            }
        }
        if self.max_iters < 1 {
            return Err(Error::Parameter("max_iters must be at least 1".into()));
        }
        if let Some(t) = self.tol {
            if !(t >= 0.0) {
                return Err(Error::Parameter(format!("tol must be non-negative, got {t}")));
            }
        }
        Ok(())
    }

    pub fn lambda_for(&self, dims: Dims) -> f64 {
        self.lambda
            .unwrap_or_else(|| (voxel_count(dims) as f64 / self.k as f64).cbrt())
    }

    /// `(ω/λ)²`, the weight on squared spatial distance.
    pub fn spatial_weight(&self, dims: Dims) -> f64 {
        let r = self.omega / self.lambda_for(dims);
        r * r
    }
}

/// Squared joint distance with a precomputed spatial weight.
#[inline]
fn distance_sq(p: &Centroid, q: &Centroid, spatial_weight: f64) -> f64 {
    let mut di = 0.0;
    for c in 0..4 {
        let d = p[c] - q[c];
        di += d * d;
    }
    let mut dxyz = 0.0;
    for a in 4..7 {
        let d = p[a] - q[a];
        dxyz += d * d;
    }
    di + spatial_weight * dxyz
}

/// Joint intensity/spatial distance between two 7-vectors.
pub fn slic_distance(p: &Centroid, q: &Centroid, omega: f64, lambda: f64) -> f64 {
    let r = omega / lambda;
    distance_sq(p, q, r * r).sqrt()
}

#[inline]
fn voxel_feature(v: &MultiModalVolume, i: usize) -> Centroid {
    let [z, y, x] = unflatten(v.dims(), i);
    let c = v.intensities(i);
    [c[0], c[1], c[2], c[3], z as f64, y as f64, x as f64]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervoxelLabeling {
    dims: Dims,
    assignment: Vec<u32>,
    centroids: Vec<Centroid>,
    sizes: Vec<usize>,
}

impl SupervoxelLabeling {
    /// Builds a labeling from an assignment grid, computing centroids and
    /// sizes from `volume`. Cluster ids must be dense in `0..n`.
    pub fn from_assignment(volume: &MultiModalVolume, assignment: Vec<u32>) -> Result<Self> {
        if assignment.len() != volume.len() {
            return Err(Error::Dimension("assignment grid differs from volume".into()));
        }
        let n = assignment
            .iter()
            .filter(|&&a| a != UNASSIGNED)
            .map(|&a| a as usize + 1)
            .max()
            .unwrap_or(0);
        let mut s = Self {
            dims: volume.dims(),
            assignment,
            centroids: vec![[0.0; 7]; n],
            sizes: vec![0; n],
        };
        s.recompute(volume);
        Ok(s)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Voxel indices of every cluster, in ascending voxel order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &a) in self.assignment.iter().enumerate() {
            if a != UNASSIGNED {
                out[a as usize].push(i);
            }
        }
        out
    }

    fn recompute(&mut self, volume: &MultiModalVolume) {
        let n = self.centroids.len();
        let mut sums = vec![[0.0f64; 7]; n];
        let mut sizes = vec![0usize; n];
        for (i, &a) in self.assignment.iter().enumerate() {
            if a == UNASSIGNED {
                continue;
            }
            let f = voxel_feature(volume, i);
            let s = &mut sums[a as usize];
            for d in 0..7 {
                s[d] += f[d];
            }
            sizes[a as usize] += 1;
        }
        for c in 0..n {
            if sizes[c] > 0 {
                self.centroids[c] = sums[c].map(|s| s / sizes[c] as f64);
            }
        }
        self.sizes = sizes;
    }

    /// Drops empty clusters and renumbers the rest densely, preserving
    /// relative order.
    fn compact(&mut self) {
        let mut remap = vec![UNASSIGNED; self.sizes.len()];
        let mut next = 0u32;
        for (c, &s) in self.sizes.iter().enumerate() {
            if s > 0 {
                remap[c] = next;
                next += 1;
            }
        }
        for a in self.assignment.iter_mut() {
            if *a != UNASSIGNED {
                *a = remap[*a as usize];
            }
        }
        let keep: Vec<usize> = (0..self.sizes.len()).filter(|&c| self.sizes[c] > 0).collect();
        self.centroids = keep.iter().map(|&c| self.centroids[c]).collect();
        self.sizes = keep.iter().map(|&c| self.sizes[c]).collect();
    }

    /// Sum of squared joint distances from each assigned voxel to its
    /// centroid.
    pub fn objective(&self, volume: &MultiModalVolume, params: &SlicParams) -> f64 {
        let w = params.spatial_weight(self.dims);
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != UNASSIGNED)
            .map(|(i, &a)| distance_sq(&voxel_feature(volume, i), &self.centroids[a as usize], w))
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.assignment.len() * 4 + self.centroids.len() * 56);
        out.extend_from_slice(SVX_MAGIC);
        put_dims(&mut out, self.dims);
        put_u32(&mut out, self.centroids.len() as u32);
        for &a in &self.assignment {
            put_u32(&mut out, a);
        }
        for c in &self.centroids {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("SVX1", buf);
        r.magic(SVX_MAGIC)?;
        let dims = r.dims()?;
        let n = r.u32()? as usize;
        let assignment = r.u32s(voxel_count(dims))?;
        let flat = r.f64s(n.checked_mul(7).ok_or_else(|| Error::format("SVX1", "size overflow"))?)?;
        r.finish()?;
        let mut sizes = vec![0usize; n];
        for &a in &assignment {
            if a != UNASSIGNED {
                let slot = sizes
                    .get_mut(a as usize)
                    .ok_or_else(|| Error::format("SVX1", format!("cluster id {a} out of range")))?;
                *slot += 1;
            }
        }
        let centroids = flat
            .chunks_exact(7)
            .map(|c| c.try_into().unwrap())
            .collect();
        Ok(Self {
            dims,
            assignment,
            centroids,
            sizes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

/// Per-iteration trace of a SLIC run.
#[derive(Clone, Debug, Default)]
pub struct SlicTrace {
    /// Objective after each assignment step and after each update step,
    /// interleaved.
    pub objective: Vec<f64>,
    /// Total centroid movement per iteration.
    pub movement: Vec<f64>,
    pub iterations: usize,
}

/// Sum of absolute central differences over all channels and axes.
fn gradient_magnitude(v: &MultiModalVolume, p: [usize; 3]) -> f64 {
    let dims = v.dims();
    let mut g = 0.0;
    for a in 0..3 {
        let mut lo = p;
        let mut hi = p;
        lo[a] = p[a].saturating_sub(1);
        hi[a] = (p[a] + 1).min(dims[a] - 1);
        let li = flat_index(dims, lo[0], lo[1], lo[2]);
        let hi_ = flat_index(dims, hi[0], hi[1], hi[2]);
        for c in v.channels() {
            g += (c[hi_] - c[li]).abs();
        }
    }
    g
}

fn grid_seeds(v: &MultiModalVolume, lambda: f64) -> Vec<Centroid> {
    let dims = v.dims();
    let counts: [usize; 3] =
        std::array::from_fn(|a| ((dims[a] as f64 / lambda).round() as usize).clamp(1, dims[a]));
    let centre = |a: usize, j: usize| (j as f64 + 0.5) * dims[a] as f64 / counts[a] as f64 - 0.5;
    let mut seeds = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[0] {
        for iy in 0..counts[1] {
            for ix in 0..counts[2] {
                let c = [centre(0, iz), centre(1, iy), centre(2, ix)];
                let p: [usize; 3] = std::array::from_fn(|a| (c[a].round() as usize).min(dims[a] - 1));
                // Move onto the lowest-gradient voxel of the 3³ neighbourhood;
                // without a strictly lower one the seed stays at the cell centre.
                let mut best = (gradient_magnitude(v, p), p);
                let mut moved = false;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let q = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                                continue;
                            }
                            let q = q.map(|c| c as usize);
                            let g = gradient_magnitude(v, q);
                            if g < best.0 {
                                best = (g, q);
                                moved = true;
                            }
                        }
                    }
                }
                let i = flat_index(dims, best.1[0], best.1[1], best.1[2]);
                let mut seed = voxel_feature(v, i);
                if !moved {
                    seed[4..].copy_from_slice(&c);
                }
                seeds.push(seed);
            }
        }
    }
    seeds
}

/// Spatial hash of centroids into cubic cells of side `cell`.
struct CentroidGrid {
    cell: f64,
    shape: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl CentroidGrid {
    fn new(centroids: &[Centroid], dims: Dims, cell: f64) -> Self {
        let shape: [usize; 3] = std::array::from_fn(|a| (dims[a] as f64 / cell).ceil() as usize + 1);
        let mut buckets = vec![Vec::new(); shape[0] * shape[1] * shape[2]];
        for (id, c) in centroids.iter().enumerate() {
            let b: [usize; 3] = std::array::from_fn(|a| {
                ((c[4 + a] / cell).floor().max(0.0) as usize).min(shape[a] - 1)
            });
            buckets[(b[0] * shape[1] + b[1]) * shape[2] + b[2]].push(id as u32);
        }
        Self {
            cell,
            shape,
            buckets,
        }
    }

    fn for_each_near(&self, p: [usize; 3], mut f: impl FnMut(u32)) {
        let b: [i64; 3] = std::array::from_fn(|a| {
            ((p[a] as f64 / self.cell).floor() as i64).min(self.shape[a] as i64 - 1)
        });
        for bz in (b[0] - 1).max(0)..=(b[0] + 1).min(self.shape[0] as i64 - 1) {
            for by in (b[1] - 1).max(0)..=(b[1] + 1).min(self.shape[1] as i64 - 1) {
                for bx in (b[2] - 1).max(0)..=(b[2] + 1).min(self.shape[2] as i64 - 1) {
                    let idx = ((bz as usize) * self.shape[1] + by as usize) * self.shape[2] + bx as usize;
                    for &id in &self.buckets[idx] {
                        f(id);
                    }
                }
            }
        }
    }
}

/// One assignment pass. Each voxel picks the nearest centroid among those
/// whose `±λ` window covers it, always including its current centroid so
/// the objective cannot increase. Ties go to the lower id.
fn assign(
    v: &MultiModalVolume,
    centroids: &[Centroid],
    assignment: &mut [u32],
    lambda: f64,
    weight: f64,
) -> f64 {
    let dims = v.dims();
    let grid = CentroidGrid::new(centroids, dims, lambda.max(1.0));
    let plane = dims[1] * dims[2];
    let slab = |(z, slab): (usize, &mut [u32])| -> f64 {
        let mut total = 0.0;
        for (j, a) in slab.iter_mut().enumerate() {
            let i = z * plane + j;
            let f = voxel_feature(v, i);
            let p = unflatten(dims, i);
            let mut best = (f64::INFINITY, UNASSIGNED);
            let consider = |best: &mut (f64, u32), id: u32| {
                let d = distance_sq(&f, &centroids[id as usize], weight);
                if d < best.0 || (d == best.0 && id < best.1) {
                    *best = (d, id);
                }
            };
            if *a != UNASSIGNED {
                consider(&mut best, *a);
            }
            grid.for_each_near(p, |id| {
                let c = &centroids[id as usize];
                if (0..3).all(|ax| (c[4 + ax] - p[ax] as f64).abs() <= lambda) {
                    consider(&mut best, id);
                }
            });
            if best.1 == UNASSIGNED {
                for id in 0..centroids.len() as u32 {
                    consider(&mut best, id);
                }
            }
            *a = best.1;
            total += best.0;
        }
        total
    };
    // Per-slab partial sums are combined in slab order, so the total does
    // not depend on the thread count.
    let partial: Vec<f64> = if voxel_count(dims) >= 1 << 15 {
        assignment.par_chunks_mut(plane).enumerate().map(slab).collect()
    } else {
        assignment.chunks_mut(plane).enumerate().map(slab).collect()
    };
    partial.into_iter().sum()
}

/// Clusters every voxel of `v` into roughly `k` supervoxels.
pub fn run_slic(v: &MultiModalVolume, params: &SlicParams) -> Result<SupervoxelLabeling> {
    run_slic_traced(v, params).map(|(s, _)| s)
}

pub fn run_slic_traced(
    v: &MultiModalVolume,
    params: &SlicParams,
) -> Result<(SupervoxelLabeling, SlicTrace)> {
    params.validate()?;
    let dims = v.dims();
    let in_brain = v.brain_voxels();
    if params.k > in_brain {
        return Err(Error::Parameter(format!(
            "k = {} exceeds the {in_brain} in-brain voxels",
            params.k
        )));
    }
    let lambda = params.lambda_for(dims);
    let weight = params.spatial_weight(dims);
    let tol = params.tol.unwrap_or(1e-4 * lambda);

    let mut labeling = SupervoxelLabeling {
        dims,
        assignment: vec![UNASSIGNED; v.len()],
        centroids: grid_seeds(v, lambda),
        sizes: Vec::new(),
    };
    let mut trace = SlicTrace::default();

    for _ in 0..params.max_iters {
        assign(v, &labeling.centroids, &mut labeling.assignment, lambda, weight);
        trace.objective.push(labeling.objective(v, params));
        let previous = labeling.centroids.clone();
        labeling.sizes = vec![0; previous.len()];
        labeling.recompute(v);
        trace.objective.push(labeling.objective(v, params));
        let moved: f64 = previous
            .iter()
            .zip(&labeling.centroids)
            .map(|(a, b)| distance_sq(a, b, weight).sqrt())
            .sum();
        trace.movement.push(moved);
        trace.iterations += 1;
        if moved < tol {
            break;
        }
    }

    if params.enforce_connectivity {
        enforce_connectivity(&mut labeling);
    }
    labeling.compact();
    labeling.recompute(v);
    Ok((labeling, trace))
}

const NEIGHBOURS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Calls `f` for each face neighbour of voxel `i`.
#[inline]
pub(crate) fn for_each_face_neighbour(dims: Dims, i: usize, mut f: impl FnMut(usize)) {
    let p = unflatten(dims, i);
    for d in NEIGHBOURS {
        let q = [p[0] as i64 + d[0], p[1] as i64 + d[1], p[2] as i64 + d[2]];
        if (0..3).all(|a| q[a] >= 0 && q[a] < dims[a] as i64) {
            f(flat_index(dims, q[0] as usize, q[1] as usize, q[2] as usize));
        }
    }
}

/// Labels the 6-connected components of each cluster. Returns the
/// per-voxel component id and each component's voxel list.
pub fn cluster_components(dims: Dims, assignment: &[u32]) -> (Vec<u32>, Vec<Vec<usize>>) {
    let mut comp = vec![UNASSIGNED; assignment.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..assignment.len() {
        if assignment[start] == UNASSIGNED || comp[start] != UNASSIGNED {
            continue;
        }
        let id = comps.len() as u32;
        let label = assignment[start];
        let mut voxels = vec![start];
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for_each_face_neighbour(dims, i, |j| {
                if assignment[j] == label && comp[j] == UNASSIGNED {
                    comp[j] = id;
                    voxels.push(j);
                    queue.push_back(j);
                }
            });
        }
        comps.push(voxels);
    }
    (comp, comps)
}

/// Keeps each cluster's largest 6-connected component and merges every
/// other component into the largest cluster it touches.
fn enforce_connectivity(s: &mut SupervoxelLabeling) {
    let dims = s.dims;
    let (comp, comps) = cluster_components(dims, &s.assignment);
    let n_clusters = s.centroids.len();
    let mut keeper: Vec<Option<usize>> = vec![None; n_clusters];
    for (cid, voxels) in comps.iter().enumerate() {
        let owner = s.assignment[voxels[0]] as usize;
        match keeper[owner] {
            Some(k) if comps[k].len() >= voxels.len() => {}
            _ => keeper[owner] = Some(cid),
        }
    }
    let mut decided: Vec<Option<u32>> = vec![None; comps.len()];
    let mut sizes = vec![0usize; n_clusters];
    for (owner, k) in keeper.iter().enumerate() {
        if let Some(k) = k {
            decided[*k] = Some(owner as u32);
            sizes[owner] = comps[*k].len();
        }
    }
    let mut pending: Vec<usize> = (0..comps.len()).filter(|&c| decided[c].is_none()).collect();
    while !pending.is_empty() {
        let mut still = Vec::new();
        let mut progressed = false;
        for &cid in &pending {
            let mut target: Option<u32> = None;
            for &i in &comps[cid] {
                for_each_face_neighbour(dims, i, |j| {
                    let other = comp[j] as usize;
                    if other == cid {
                        return;
                    }
                    if let Some(label) = decided[other] {
                        let better = match target {
                            None => true,
                            Some(t) => {
                                let (ls, ts) = (sizes[label as usize], sizes[t as usize]);
                                ls > ts || (ls == ts && label < t)
                            }
                        };
                        if better {
                            target = Some(label);
                        }
                    }
                });
            }
            match target {
                Some(t) => {
                    decided[cid] = Some(t);
                    sizes[t as usize] += comps[cid].len();
                    progressed = true;
                }
                None => still.push(cid),
            }
        }
        if !progressed {
            // Components with no decided neighbour at all (disconnected
            // domain) become clusters of their own.
            for &cid in &still {
                decided[cid] = Some(sizes.len() as u32);
                sizes.push(comps[cid].len());
                s.centroids.push([0.0; 7]);
            }
            break;
        }
        pending = still;
    }
    for (cid, voxels) in comps.iter().enumerate() {
        let label = decided[cid].expect("every component decided");
        for &i in voxels {
            s.assignment[i] = label;
        }
    }
    s.sizes = sizes;
}

/// Restricts clusters to brain voxels and drops clusters with no brain
/// voxel (zero raw intensity in every modality). Surviving ids are
/// compacted to `0..n` in their original order.
pub fn remove_outliers(s: &SupervoxelLabeling, v: &MultiModalVolume) -> Result<SupervoxelLabeling> {
    if s.dims != v.dims() {
        return Err(Error::Dimension(format!(
            "labeling {:?} vs volume {:?}",
            s.dims,
            v.dims()
        )));
    }
    let mut out = s.clone();
    for (a, &m) in out.assignment.iter_mut().zip(v.mask()) {
        if !m {
            *a = UNASSIGNED;
        }
    }
    out.sizes = vec![0; out.centroids.len()];
    out.recompute(v);
    out.compact();
    if out.n_clusters() == 0 {
        return Err(Error::EmptyGraph);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(dims: Dims, value: f64) -> MultiModalVolume {
        let c = vec![value; voxel_count(dims)];
        MultiModalVolume::new(dims, [1.0; 3], [c.clone(), c.clone(), c.clone(), c]).unwrap()
    }

    #[test]
    fn distance_examples() {
        let p = [0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0];
        assert_eq!(slic_distance(&p, &p, 1.0, 1.0), 0.0);
        let mut q = p;
        q[0] += 1.0;
        assert!((slic_distance(&p, &q, 1.0, 1.0) - 1.0).abs() < 1e-15);
        let mut r = p;
        r[6] += 1.0;
        assert!((slic_distance(&p, &r, 1.0, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_cluster() {
        let v = constant_volume([6, 6, 6], 1.0);
        let s = run_slic(&v, &SlicParams { k: 1, ..SlicParams::default() }).unwrap();
        assert_eq!(s.n_clusters(), 1);
        assert_eq!(s.sizes(), &[216]);
    }

    #[test]
    fn constant_volume_balanced() {
        let v = constant_volume([16, 16, 16], 1.0);
        let s = run_slic(&v, &SlicParams { k: 8, ..SlicParams::default() }).unwrap();
        assert_eq!(s.n_clusters(), 8);
        for &size in s.sizes() {
            assert!((size as f64 - 512.0).abs() <= 0.25 * 512.0, "size {size}");
        }
    }

    #[test]
    fn k_too_large() {
        let v = constant_volume([2, 2, 2], 1.0);
        let err = run_slic(&v, &SlicParams { k: 9, ..SlicParams::default() }).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn invalid_params() {
        let v = constant_volume([4, 4, 4], 1.0);
        for p in [
            SlicParams { k: 0, ..SlicParams::default() },
            SlicParams { omega: 0.0, k: 2, ..SlicParams::default() },
            SlicParams { max_iters: 0, k: 2, ..SlicParams::default() },
            SlicParams { lambda: Some(-1.0), k: 2, ..SlicParams::default() },
        ] {
            assert!(run_slic(&v, &p).is_err());
        }
    }

    #[test]
    fn centroids_are_member_means() {
        let dims = [8, 8, 8];
        let c: Vec<f64> = (0..512).map(|i| ((i * 7919) % 13) as f64 + 1.0).collect();
        let v = MultiModalVolume::new(dims, [1.0; 3], [c.clone(), c.clone(), c.clone(), c]).unwrap();
        let s = run_slic(&v, &SlicParams { k: 8, ..SlicParams::default() }).unwrap();
        for (cid, members) in s.members().iter().enumerate() {
            let mut mean = [0.0; 7];
            for &i in members {
                let f = voxel_feature(&v, i);
                for d in 0..7 {
                    mean[d] += f[d] / members.len() as f64;
                }
            }
            for d in 0..7 {
                assert!((mean[d] - s.centroids()[cid][d]).abs() < 1e-9);
            }
        }
        assert_eq!(s.sizes().iter().sum::<usize>(), 512);
    }

    #[test]
    fn remove_outliers_drops_zero_cluster() {
        let dims = [1, 1, 10];
        let vals: Vec<f64> = (0..10).map(|i| if i < 2 { 0.0 } else { 1.0 }).collect();
        let v = MultiModalVolume::new(dims, [1.0; 3], [vals.clone(), vals.clone(), vals.clone(), vals])
            .unwrap();
        let assignment = vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4];
        let s = SupervoxelLabeling::from_assignment(&v, assignment).unwrap();
        let r = remove_outliers(&s, &v).unwrap();
        assert_eq!(r.n_clusters(), 4);
        assert_eq!(r.assignment(), &[UNASSIGNED, UNASSIGNED, 0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn remove_outliers_identity_without_zeros() {
        let v = constant_volume([2, 2, 2], 1.0);
        let s = SupervoxelLabeling::from_assignment(&v, vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        assert_eq!(remove_outliers(&s, &v).unwrap(), s);
    }

    #[test]
    fn remove_outliers_everything_empty() {
        let v = constant_volume([2, 2, 2], 0.0);
        let s = SupervoxelLabeling::from_assignment(&v, vec![0; 8]).unwrap();
        assert!(matches!(remove_outliers(&s, &v), Err(Error::EmptyGraph)));
    }

    #[test]
    fn svx_round_trip() {
        let v = constant_volume([4, 4, 4], 2.0);
        let s = run_slic(&v, &SlicParams { k: 8, ..SlicParams::default() }).unwrap();
        let back = SupervoxelLabeling::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn components_split_disjoint_runs() {
        let dims = [1, 1, 5];
        let (comp, comps) = cluster_components(dims, &[0, 0, 1, 0, 0]);
        assert_eq!(comps.len(), 3);
        assert_eq!(comp, vec![0, 0, 1, 2, 2]);
    }
}
