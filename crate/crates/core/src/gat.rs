//! Multi-head graph attention layers and the stacked node classifier.
//!
//! For an edge `q → p` and head `k` the layer scores
//! `e = LeakyReLU(aₖᵀ [Wₖ h_p ‖ Wₖ h_q])`, normalizes the scores over the
//! in-neighbourhood of `p` with a softmax, and aggregates
//! `Σ_q α_pq Wₖ h_q`. Hidden layers apply LeakyReLU per head and
//! concatenate heads; the output layer averages heads and applies a row
//! softmax over classes. There are no bias terms.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Rag, FEATURE_WIDTH};
use crate::io::{put_u32, read_bytes, write_bytes, ByteReader};
use crate::scalar::Scalar;
use crate::tensor::{leaky_relu, Tape, Tensor, Var};
use crate::volume::N_CLASSES;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GATC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMerge {
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerActivation {
    /// LeakyReLU on each head before merging.
    LeakyRelu,
    /// Row softmax after merging.
    Softmax,
}

/// Directed message edges `src → dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    n_nodes: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

impl EdgeIndex {
    pub fn new(n_nodes: usize, src: Vec<usize>, dst: Vec<usize>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Dimension("src and dst lengths differ".into()));
        }
        if let Some(&bad) = src.iter().chain(&dst).find(|&&i| i >= n_nodes) {
            return Err(Error::Dimension(format!("edge endpoint {bad} with {n_nodes} nodes")));
        }
        Ok(Self {
            n_nodes,
            src: src.into(),
            dst: dst.into(),
        })
    }

    /// Both directions of every undirected pair plus one self-loop per node.
    pub fn with_self_loops(n_nodes: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut src = Vec::with_capacity(pairs.len() * 2 + n_nodes);
        let mut dst = Vec::with_capacity(pairs.len() * 2 + n_nodes);
        for &(a, b) in pairs {
            src.extend([a as usize, b as usize]);
            dst.extend([b as usize, a as usize]);
        }
        src.extend(0..n_nodes);
        dst.extend(0..n_nodes);
        Self::new(n_nodes, src, dst)
    }

    pub fn for_rag(g: &Rag) -> Result<Self> {
        Self::with_self_loops(g.n_nodes(), g.edges())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatConvLayer<T> {
    in_dim: usize,
    out_dim: usize,
    heads: usize,
    negative_slope: T,
    merge: HeadMerge,
    activation: LayerActivation,
    /// Per head, `in_dim × out_dim`; applied as `h · W`.
    weights: Vec<Tensor<T>>,
    /// Per head, `2·out_dim × 1`: destination half then source half.
    attention: Vec<Tensor<T>>,
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub weights: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Result of a traced layer forward.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub output: Var,
    /// Per-head attention weights over the edge list.
    pub attention: Vec<Var>,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches sample count")
}

impl<T: Scalar> GatConvLayer<T> {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        negative_slope: f64,
        merge: HeadMerge,
        activation: LayerActivation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || heads == 0 {
            return Err(Error::Parameter("layer widths and head count must be positive".into()));
        }
        if !(negative_slope > 0.0 && negative_slope < 1.0) {
            return Err(Error::Parameter(format!(
                "negative slope must lie in (0, 1), got {negative_slope}"
            )));
        }
        let weights = (0..heads)
            .map(|_| glorot(rng, in_dim, out_dim, vec![in_dim, out_dim]))
            .collect();
        let attention = (0..heads)
            .map(|_| glorot(rng, 2 * out_dim, 1, vec![2 * out_dim, 1]))
            .collect();
        Ok(Self {
            in_dim,
            out_dim,
            heads,
            negative_slope: T::of(negative_slope),
            merge,
            activation,
            weights,
            attention,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn merge(&self) -> HeadMerge {
        self.merge
    }

    pub fn activation(&self) -> LayerActivation {
        self.activation
    }

    pub fn negative_slope(&self) -> T {
        self.negative_slope
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn attention(&self) -> &[Tensor<T>] {
        &self.attention
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.weights
    }

    pub fn attention_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.attention
    }

    pub fn output_width(&self) -> usize {
        match self.merge {
            HeadMerge::Concat => self.heads * self.out_dim,
            HeadMerge::Average => self.out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.heads * (self.out_dim * self.in_dim + 2 * self.out_dim)
    }

    /// Parameters in checkpoint order: per head, weight then attention.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.weights.iter().zip(&self.attention).flat_map(|(w, a)| [w, a])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.attention.iter_mut())
            .flat_map(|(w, a)| [w, a])
    }

    /// Unnormalized attention score of source `h_q` for destination `h_p`
    /// under head `head`, evaluated directly.
    pub fn edge_logit(&self, h_p: &[T], h_q: &[T], head: usize) -> T {
        let w = &self.weights[head];
        let a = self.attention[head].data();
        let project = |h: &[T], j: usize| -> T {
            (0..self.in_dim).map(|i| h[i] * w.data()[i * self.out_dim + j]).sum()
        };
        let mut s = T::zero();
        for j in 0..self.out_dim {
            s = s + a[j] * project(h_p, j) + a[self.out_dim + j] * project(h_q, j);
        }
        leaky_relu(s, self.negative_slope)
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
        let mut put = |t: &Tensor<T>| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        };
        LayerVars {
            weights: self.weights.iter().map(&mut put).collect(),
            attention: self.attention.iter().map(&mut put).collect(),
        }
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &LayerVars,
        h: Var,
        edges: &EdgeIndex,
    ) -> Result<LayerOutput> {
        let (n, f) = tape.value(h).dims2()?;
        if f != self.in_dim {
            return Err(Error::Dimension(format!(
                "layer expects {} input features, got {f}",
                self.in_dim
            )));
        }
        if n != edges.n_nodes {
            return Err(Error::Dimension(format!(
                "{n} feature rows for {} graph nodes",
                edges.n_nodes
            )));
        }
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let f_out = self.out_dim;
        let dst_half: Arc<[usize]> = (0..f_out).collect();
        let src_half: Arc<[usize]> = (f_out..2 * f_out).collect();
        for k in 0..self.heads {
            let z = tape.matmul(h, vars.weights[k])?;
            // aᵀ[z_p ‖ z_q] = a_dstᵀ z_p + a_srcᵀ z_q, scored per node and
            // then gathered per edge.
            let a_dst = tape.gather_rows(vars.attention[k], dst_half.clone())?;
            let a_src = tape.gather_rows(vars.attention[k], src_half.clone())?;
            let s_dst = tape.matmul(z, a_dst)?;
            let s_src = tape.matmul(z, a_src)?;
            let e_dst = tape.gather_rows(s_dst, edges.dst.clone())?;
            let e_src = tape.gather_rows(s_src, edges.src.clone())?;
            let score = tape.add(e_dst, e_src)?;
            let score = tape.leaky_relu(score, self.negative_slope);
            let alpha = tape.segment_softmax(score, edges.dst.clone(), n)?;
            let mut agg = tape.weighted_scatter(z, alpha, edges.src.clone(), edges.dst.clone(), n)?;
            if self.activation == LayerActivation::LeakyRelu {
                agg = tape.leaky_relu(agg, self.negative_slope);
            }
            heads.push(agg);
            weights.push(alpha);
        }
        let merged = match self.merge {
            HeadMerge::Concat => tape.concat_cols(&heads)?,
            HeadMerge::Average => {
                let mut acc = heads[0];
                for &hk in &heads[1..] {
                    acc = tape.add(acc, hk)?;
                }
                tape.scale(acc, T::one() / T::of(self.heads as f64))
            }
        };
        let output = match self.activation {
            LayerActivation::LeakyRelu => merged,
            LayerActivation::Softmax => tape.softmax_rows(merged)?,
        };
        Ok(LayerOutput {
            output,
            attention: weights,
        })
    }

    pub fn forward(&self, h: &Tensor<T>, edges: &EdgeIndex) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(h.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x, edges)?;
        Ok(tape.value(out.output).clone())
    }

    /// Per-head attention weights, aligned with the edge list.
    pub fn attention_weights(&self, h: &Tensor<T>, edges: &EdgeIndex) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(h.clone());
        let out = self.forward_on_tape(&mut tape, &vars, x, edges)?;
        Ok(out
            .attention
            .iter()
            .map(|&a| tape.value(a).data().to_vec())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub in_dim: usize,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub hidden_heads: usize,
    pub classes: usize,
    pub output_heads: usize,
    pub negative_slope: f64,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            in_dim: FEATURE_WIDTH,
            hidden_layers: 8,
            hidden_dim: 64,
            hidden_heads: 8,
            classes: N_CLASSES,
            output_heads: 8,
            negative_slope: 0.2,
            seed: 0,
        }
    }
}

impl GatConfig {
    /// `(in_dim, out_dim, heads)` of every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut width = self.in_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((width, self.hidden_dim, self.hidden_heads));
            width = self.hidden_dim * self.hidden_heads;
        }
        shapes.push((width, self.classes, self.output_heads));
        shapes
    }

    /// Closed-form trainable parameter count: `Σ K·(f′·f + 2f′)`.
    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(f, fp, k)| k * (fp * f + 2 * fp))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatModel<T> {
    config: GatConfig,
    layers: Vec<GatConvLayer<T>>,
}

impl<T: Scalar> GatModel<T> {
    pub fn new(config: GatConfig) -> Result<Self> {
        if config.in_dim == 0 || config.classes == 0 {
            return Err(Error::Parameter("input width and class count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(f, fp, k))| {
                let (merge, act) = if i == last {
                    (HeadMerge::Average, LayerActivation::Softmax)
                } else {
                    (HeadMerge::Concat, LayerActivation::LeakyRelu)
                };
                GatConvLayer::new(f, fp, k, config.negative_slope, merge, act, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    pub fn layers(&self) -> &[GatConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GatConvLayer<T>] {
        &mut self.layers
    }

    /// Counted from the allocated tensors; equals
    /// [`GatConfig::param_count`].
    pub fn param_count(&self) -> usize {
        self.parameters().map(Tensor::len).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(GatConvLayer::parameters)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(GatConvLayer::parameters_mut)
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.register(tape, trainable)).collect()
    }

    /// Parameter handles flattened in [`parameters`](Self::parameters) order.
    pub fn flatten_vars(vars: &[LayerVars]) -> Vec<Var> {
        vars.iter()
            .flat_map(|l| l.weights.iter().zip(&l.attention).flat_map(|(&w, &a)| [w, a]))
            .collect()
    }

    /// Runs every layer on the tape and returns the `n × classes`
    /// probability node. Fails with the index of the first layer whose
    /// output is not finite.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[LayerVars],
        x: Var,
        edges: &EdgeIndex,
    ) -> Result<Var> {
        let mut h = x;
        for (i, (layer, lv)) in self.layers.iter().zip(vars).enumerate() {
            h = layer.forward_on_tape(tape, lv, h, edges)?.output;
            if !tape.value(h).is_finite() {
                return Err(Error::NumericFailure { layer: i });
            }
        }
        Ok(h)
    }

    /// Row-stochastic class probabilities for every node.
    pub fn forward(&self, x: &Tensor<T>, edges: &EdgeIndex) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &vars, xv, edges)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_rag(&self, g: &Rag) -> Result<Tensor<T>> {
        let edges = EdgeIndex::for_rag(g)?;
        self.forward(&features_tensor(g), &edges)
    }

    /// Most probable class per node (lowest id on ties).
    pub fn predict(&self, g: &Rag) -> Result<Vec<u8>> {
        Ok(argmax_rows(&self.forward_rag(g)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.param_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        for p in self.parameters() {
            for v in p.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("GATC", buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("GATC", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: GatConfig = serde_json::from_slice(r.take(len)?)?;
        let mut model = Self::new(config)?;
        for p in model.parameters_mut() {
            let values = r.f64s(p.len())?;
            for (d, v) in p.data_mut().iter_mut().zip(values) {
                *d = T::of(v);
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

pub fn features_tensor<T: Scalar>(g: &Rag) -> Tensor<T> {
    Tensor::new(
        vec![g.n_nodes(), FEATURE_WIDTH],
        g.features().iter().map(|&v| T::of(v)).collect(),
    )
    .expect("rag features are n × 20")
}

pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let (n, _) = probs.dims2().expect("probabilities are a matrix");
    (0..n)
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
