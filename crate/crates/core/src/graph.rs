//! Region adjacency graph over supervoxels.
//!
//! Each supervoxel becomes a node described by the 10/25/50/75/90th
//! percentiles of its member intensities in every modality (20 features,
//! modality-major). Nodes are joined when their supervoxels share a voxel
//! face.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{put_u32, read_bytes, write_bytes, ByteReader};
use crate::stats;
use crate::supervoxel::{for_each_face_neighbour, SupervoxelLabeling, UNASSIGNED};
use crate::volume::{LabelVolume, MultiModalVolume, N_CLASSES, N_MODALITIES};

pub const FEATURE_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];
pub const FEATURE_WIDTH: usize = FEATURE_PERCENTILES.len() * N_MODALITIES;

pub const RAG_MAGIC: &[u8; 4] = b"RAG1";

#[derive(Clone, Debug, PartialEq)]
pub struct Rag {
    /// Row-major `n × FEATURE_WIDTH`.
    features: Vec<f64>,
    /// Undirected pairs stored once with `a < b`, sorted.
    edges: Vec<(u32, u32)>,
    labels: Option<Vec<u8>>,
    node_to_cluster: Vec<u32>,
}

impl Rag {
    pub fn new(
        features: Vec<f64>,
        edges: Vec<(u32, u32)>,
        labels: Option<Vec<u8>>,
        node_to_cluster: Vec<u32>,
    ) -> Result<Self> {
        if features.len() % FEATURE_WIDTH != 0 {
            return Err(Error::Dimension(format!(
                "feature buffer of {} is not a multiple of {FEATURE_WIDTH}",
                features.len()
            )));
        }
        let n = features.len() / FEATURE_WIDTH;
        if node_to_cluster.len() != n {
            return Err(Error::Dimension("node_to_cluster length differs from node count".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Dimension("label count differs from node count".into()));
            }
            if l.iter().any(|&c| c as usize >= N_CLASSES) {
                return Err(Error::Contract("node label outside 0..=3".into()));
            }
        }
        let mut set = BTreeSet::new();
        for &(a, b) in &edges {
            if a as usize >= n || b as usize >= n {
                return Err(Error::Dimension(format!("edge ({a}, {b}) with {n} nodes")));
            }
            if a == b {
                return Err(Error::Contract(format!("self-pair ({a}, {a}) stored")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Contract(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self {
            features,
            edges: set.into_iter().collect(),
            labels,
            node_to_cluster,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_to_cluster.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn node_features(&self, node: usize) -> &[f64] {
        &self.features[node * FEATURE_WIDTH..(node + 1) * FEATURE_WIDTH]
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<u8>) -> Result<()> {
        if labels.len() != self.n_nodes() {
            return Err(Error::Dimension("label count differs from node count".into()));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn node_to_cluster(&self) -> &[u32] {
        &self.node_to_cluster
    }

    /// Per-class node counts, if labels are attached.
    pub fn class_counts(&self) -> Option<[usize; N_CLASSES]> {
        self.labels.as_ref().map(|l| class_counts(l))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_nodes();
        let mut out = Vec::with_capacity(16 + self.features.len() * 8 + self.edges.len() * 8 + n * 5);
        out.extend_from_slice(RAG_MAGIC);
        put_u32(&mut out, n as u32);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.edges.len() as u32);
        for &(a, b) in &self.edges {
            put_u32(&mut out, a);
            put_u32(&mut out, b);
        }
        match &self.labels {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(l);
            }
            None => out.push(0),
        }
        for &c in &self.node_to_cluster {
            put_u32(&mut out, c);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("RAG1", buf);
        r.magic(RAG_MAGIC)?;
        let n = r.u32()? as usize;
        let features = r.f64s(n * FEATURE_WIDTH)?;
        let n_edges = r.u32()? as usize;
        let flat = r.u32s(n_edges * 2)?;
        let edges = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let labels = match r.u8()? {
            0 => None,
            1 => Some(r.take(n)?.to_vec()),
            f => return Err(Error::format("RAG1", format!("bad label flag {f}"))),
        };
        let node_to_cluster = r.u32s(n)?;
        r.finish()?;
        Self::new(features, edges, labels, node_to_cluster)
            .map_err(|e| Error::format("RAG1", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

pub fn class_counts(labels: &[u8]) -> [usize; N_CLASSES] {
    let mut c = [0; N_CLASSES];
    for &l in labels {
        c[l as usize] += 1;
    }
    c
}

/// Percentile features of every cluster, `n × 20` row-major.
pub fn extract_features(s: &SupervoxelLabeling, v: &MultiModalVolume) -> Result<Vec<f64>> {
    if s.dims() != v.dims() {
        return Err(Error::Dimension("labeling and volume grids differ".into()));
    }
    let members = s.members();
    let mut out = Vec::with_capacity(members.len() * FEATURE_WIDTH);
    let mut buf = Vec::new();
    for (cid, voxels) in members.iter().enumerate() {
        if voxels.is_empty() {
            return Err(Error::Contract(format!("cluster {cid} is empty")));
        }
        for channel in v.channels() {
            buf.clear();
            buf.extend(voxels.iter().map(|&i| channel[i]));
            buf.sort_by(f64::total_cmp);
            for &p in &FEATURE_PERCENTILES {
                out.push(stats::percentile_sorted(&buf, p).expect("non-empty cluster"));
            }
        }
    }
    Ok(out)
}

/// Face-adjacent cluster pairs `(a, b)` with `a < b`, sorted.
pub fn build_adjacency(s: &SupervoxelLabeling) -> Vec<(u32, u32)> {
    let dims = s.dims();
    let a = s.assignment();
    let mut set = BTreeSet::new();
    for (i, &ci) in a.iter().enumerate() {
        if ci == UNASSIGNED {
            continue;
        }
        for_each_face_neighbour(dims, i, |j| {
            let cj = a[j];
            if cj != UNASSIGNED && cj != ci {
                set.insert((ci.min(cj), ci.max(cj)));
            }
        });
    }
    set.into_iter().collect()
}

/// Majority class of each cluster's voxels; ties go to the smaller id.
pub fn attach_labels(s: &SupervoxelLabeling, gt: &LabelVolume) -> Result<Vec<u8>> {
    if s.dims() != gt.dims() {
        return Err(Error::Dimension("labeling and label grids differ".into()));
    }
    let mut votes = vec![[0usize; N_CLASSES]; s.n_clusters()];
    for (&c, &l) in s.assignment().iter().zip(gt.labels()) {
        if c != UNASSIGNED {
            votes[c as usize][l as usize] += 1;
        }
    }
    Ok(votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..N_CLASSES {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Paints every voxel of cluster `c` with `node_labels[c]`; unassigned
/// voxels are background.
pub fn project_to_voxels(s: &SupervoxelLabeling, node_labels: &[u8], spacing: [f64; 3]) -> Result<LabelVolume> {
    if node_labels.len() != s.n_clusters() {
        return Err(Error::Contract(format!(
            "{} node labels for {} clusters",
            node_labels.len(),
            s.n_clusters()
        )));
    }
    let labels = s
        .assignment()
        .iter()
        .map(|&c| if c == UNASSIGNED { 0 } else { node_labels[c as usize] })
        .collect();
    LabelVolume::new(s.dims(), spacing, labels)
}

/// Builds the full graph from an outlier-free labeling.
pub fn build_rag(s: &SupervoxelLabeling, v: &MultiModalVolume, gt: Option<&LabelVolume>) -> Result<Rag> {
    let features = extract_features(s, v)?;
    let edges = build_adjacency(s);
    let labels = gt.map(|g| attach_labels(s, g)).transpose()?;
    Rag::new(features, edges, labels, (0..s.n_clusters() as u32).collect())
}

/// CSV of label and predicted node counts per tumor class.
pub fn write_node_counts_csv(
    mut w: impl Write,
    label_counts: [usize; N_CLASSES],
    predicted_counts: [usize; N_CLASSES],
) -> std::io::Result<()> {
    writeln!(w, "class,label_nodes,predicted_nodes")?;
    for (c, name) in [(2, "edema"), (1, "necrosis"), (3, "enhancing")] {
        writeln!(w, "{name},{},{}", label_counts[c], predicted_counts[c])?;
    }
    Ok(())
}
