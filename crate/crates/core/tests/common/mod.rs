//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelgat::graph::{Rag, FEATURE_WIDTH};
use voxelgat::tensor::{Tape, Tensor, Var};
use voxelgat::volume::Dims;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2, 2] kept at least `gap` away from zero.
pub fn uniform_off_zero(rng: &mut impl Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient of the scalar built by
/// `f` and a central finite difference, over every entry of every input.
pub fn max_grad_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).len(), 1, "objective must be scalar");
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).expect("leaf has a gradient").to_vec();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output entry contributes a distinct term.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = uniform(&mut rng(seed), shape, 0.5, 1.5);
    let w = tape.constant(w);
    let m = tape.mul(v, w).unwrap();
    tape.sum(m)
}

/// Random graph with `n` nodes, features in [-2, 2] of width `f` and
/// undirected edges stored once as `a < b`.
pub fn random_graph(rng: &mut impl Rng, n: usize, f: usize, density: f64) -> (Tensor<f64>, Vec<(u32, u32)>) {
    let x = uniform(rng, vec![n, f], -2.0, 2.0);
    let mut edges = Vec::new();
    for a in 0..n as u32 {
        for b in a + 1..n as u32 {
            if rng.gen_bool(density) {
                edges.push((a, b));
            }
        }
    }
    (x, edges)
}

/// Random labelled region graph with 20-wide features.
pub fn random_rag(rng: &mut impl Rng, n: usize) -> Rag {
    let (x, edges) = random_graph(rng, n, FEATURE_WIDTH, 0.3);
    let labels = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
    Rag::new(x.into_data(), edges, Some(labels), (0..n as u32).collect()).unwrap()
}

/// A 30-node chain whose four classes occupy contiguous runs and each own
/// five feature columns.
pub fn separable_graph(seed: u64) -> Rag {
    let n = 30;
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i * 4 / n) as u8).collect();
    let mut features = vec![0.0; n * FEATURE_WIDTH];
    for i in 0..n {
        for j in 0..FEATURE_WIDTH {
            let on = j / 5 == labels[i] as usize;
            features[i * FEATURE_WIDTH + j] = f64::from(u8::from(on)) + r.gen_range(-0.1..0.1);
        }
    }
    let edges = (1..n as u32).map(|i| (i - 1, i)).collect();
    Rag::new(features, edges, Some(labels), (0..n as u32).collect()).unwrap()
}

/// A uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn brute_dice(pred: &[bool], gt: &[bool]) -> f64 {
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let sp = pred.iter().filter(|&&p| p).count();
    let sg = gt.iter().filter(|&&g| g).count();
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (sp + sg) as f64
    }
}

fn coords(dims: Dims, i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Distance from every voxel of `from` to the nearest voxel of `to`,
/// found by exhaustive search.
fn brute_directed(from: &[bool], to: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let targets: Vec<[usize; 3]> = (0..to.len()).filter(|&i| to[i]).map(|i| coords(dims, i)).collect();
    (0..from.len())
        .filter(|&i| from[i])
        .map(|i| {
            let p = coords(dims, i);
            targets
                .iter()
                .map(|q| {
                    let mut s = 0.0;
                    for a in 0..3 {
                        let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                        s += d * d;
                    }
                    s
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile written out from its definition.
pub fn naive_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (v.len() as f64 - 1.0);
    let i = pos.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    let t = pos - i as f64;
    if t == 0.0 {
        v[i]
    } else {
        v[i] + t * (v[i + 1] - v[i])
    }
}

pub fn brute_hd95(pred: &[bool], gt: &[bool], dims: Dims, spacing: [f64; 3]) -> Option<f64> {
    let (np, ng) = (pred.iter().any(|&b| b), gt.iter().any(|&b| b));
    match (np, ng) {
        (false, false) => Some(0.0),
        (true, true) => {
            let mut all = brute_directed(pred, gt, dims, spacing);
            all.extend(brute_directed(gt, pred, dims, spacing));
            Some(naive_percentile(&all, 95.0))
        }
        _ => None,
    }
}

/// Largest nearest-voxel distance in either direction.
pub fn brute_hausdorff(a: &[bool], b: &[bool], dims: Dims, spacing: [f64; 3]) -> f64 {
    brute_directed(a, b, dims, spacing)
        .into_iter()
        .chain(brute_directed(b, a, dims, spacing))
        .fold(0.0, f64::max)
}

pub fn random_mask(rng: &mut impl Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(density)).collect()
}

/// Number of 6-connected components among voxels carrying `id`.
pub fn components_of(dims: Dims, assignment: &[u32], id: u32) -> usize {
    let mut seen = vec![false; assignment.len()];
    let mut count = 0;
    for start in 0..assignment.len() {
        if assignment[start] != id || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let p = coords(dims, i);
            for a in 0..3 {
                for delta in [-1i64, 1] {
                    let c = p[a] as i64 + delta;
                    if c < 0 || c >= dims[a] as i64 {
                        continue;
                    }
                    let mut q = p;
                    q[a] = c as usize;
                    let j = (q[0] * dims[1] + q[1]) * dims[2] + q[2];
                    if assignment[j] == id && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Finite-difference error of every differentiable tape op on random
/// inputs, keyed by op name.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use std::sync::Arc;
    let mut r = rng(seed);
    let a = uniform(&mut r, vec![4, 3], -2.0, 2.0);
    let b = uniform(&mut r, vec![3, 5], -2.0, 2.0);
    let c = uniform(&mut r, vec![4, 3], -2.0, 2.0);
    let d = uniform(&mut r, vec![4, 2], -2.0, 2.0);
    let kinked = uniform_off_zero(&mut r, vec![4, 3], 1e-3);
    let logits = uniform(&mut r, vec![9], -2.0, 2.0);
    let positive = uniform(&mut r, vec![4, 3], 0.1, 2.0);
    let row_w = uniform(&mut r, vec![4], -2.0, 2.0);
    let edge_w = uniform(&mut r, vec![7], 0.0, 1.0);
    let groups: Arc<[usize]> = vec![0, 1, 0, 2, 2, 2, 1, 0, 3].into();
    let idx: Arc<[usize]> = vec![3, 0, 0, 2, 1, 3, 3].into();
    let src: Arc<[usize]> = vec![0, 1, 2, 3, 0, 2, 1].into();
    let dst: Arc<[usize]> = vec![1, 1, 0, 4, 2, 2, 3].into();
    let e = uniform(&mut r, vec![7, 3], -2.0, 2.0);

    let mut out = Vec::new();
    out.push(("matmul", max_grad_error(&[a.clone(), b.clone()], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, m, 1)
    })));
    out.push(("add", max_grad_error(&[a.clone(), c.clone()], |t, v| {
        let m = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, m, 2)
    })));
    out.push(("mul", max_grad_error(&[a.clone(), c.clone()], |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, m, 3)
    })));
    out.push(("scale", max_grad_error(&[a.clone()], |t, v| {
        let m = t.scale(v[0], -1.7);
        weighted_sum(t, m, 4)
    })));
    out.push(("concat_cols", max_grad_error(&[a.clone(), d.clone()], |t, v| {
        let m = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        weighted_sum(t, m, 5)
    })));
    out.push(("leaky_relu", max_grad_error(&[kinked], |t, v| {
        let m = t.leaky_relu(v[0], 0.2);
        weighted_sum(t, m, 6)
    })));
    out.push(("segment_softmax", max_grad_error(&[logits], |t, v| {
        let m = t.segment_softmax(v[0], groups.clone(), 4).unwrap();
        weighted_sum(t, m, 7)
    })));
    out.push(("softmax_rows", max_grad_error(&[a.clone()], |t, v| {
        let m = t.softmax_rows(v[0]).unwrap();
        weighted_sum(t, m, 8)
    })));
    out.push(("gather_rows", max_grad_error(&[a.clone()], |t, v| {
        let m = t.gather_rows(v[0], idx.clone()).unwrap();
        weighted_sum(t, m, 9)
    })));
    out.push(("scatter_add_rows", max_grad_error(&[e.clone()], |t, v| {
        let m = t.scatter_add_rows(v[0], idx.clone(), 5).unwrap();
        weighted_sum(t, m, 10)
    })));
    out.push(("scale_rows", max_grad_error(&[a.clone(), row_w], |t, v| {
        let m = t.scale_rows(v[0], v[1]).unwrap();
        weighted_sum(t, m, 11)
    })));
    out.push(("weighted_scatter", max_grad_error(&[a.clone(), edge_w], |t, v| {
        let m = t.weighted_scatter(v[0], v[1], src.clone(), dst.clone(), 5).unwrap();
        weighted_sum(t, m, 12)
    })));
    out.push(("log", max_grad_error(&[positive], |t, v| {
        let m = t.log(v[0], 1e-12);
        weighted_sum(t, m, 13)
    })));
    out.push(("reshape", max_grad_error(&[a.clone()], |t, v| {
        let m = t.reshape(v[0], vec![2, 6]).unwrap();
        weighted_sum(t, m, 14)
    })));
    out.push(("sum", max_grad_error(&[a], |t, v| t.sum(v[0]))));
    out
}

/// Finite-difference error over every parameter of a two-layer GAT (one
/// hidden concat layer, one averaged softmax output layer) on a random
/// 8-node graph, with a fixed weighted readout of the probabilities.
pub fn gat_gradient_error(seed: u64) -> f64 {
    use voxelgat::gat::{EdgeIndex, GatConfig, GatModel};
    let mut r = rng(seed);
    let (x, pairs) = random_graph(&mut r, 8, 5, 0.35);
    let edges = EdgeIndex::with_self_loops(8, &pairs).unwrap();
    let cfg = GatConfig {
        in_dim: 5,
        hidden_layers: 1,
        hidden_dim: 3,
        hidden_heads: 2,
        classes: 4,
        output_heads: 2,
        negative_slope: 0.2,
        seed,
    };
    let model = GatModel::<f64>::new(cfg).unwrap();
    let params: Vec<Tensor<f64>> = model.parameters().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(params);
    max_grad_error(&inputs, |t, v| {
        let vars: Vec<voxelgat::gat::LayerVars> = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, _)| voxelgat::gat::LayerVars {
                weights: (0..2).map(|k| v[1 + i * 4 + 2 * k]).collect(),
                attention: (0..2).map(|k| v[2 + i * 4 + 2 * k]).collect(),
            })
            .collect();
        let probs = model.forward_on_tape(t, &vars, v[0], &edges).unwrap();
        let lp = t.log(probs, 1e-12);
        weighted_sum(t, lp, 99)
    })
}
