//! Weighted node-wise cross-entropy, Adam with exponential learning-rate
//! decay, mini-batching of graphs and the epoch loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::{features_tensor, argmax_rows, EdgeIndex, GatModel};
use crate::graph::{Rag, FEATURE_WIDTH};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::N_CLASSES;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub graphs_per_batch: usize,
    pub base_lr: f64,
    /// Per-epoch exponential decay constant: `lr = base · exp(−rate · epoch)`.
    pub decay_rate: f64,
    /// `None` uses inverse class frequency over the training nodes.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub val_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            graphs_per_batch: 6,
            base_lr: 1e-4,
            decay_rate: 1e-4,
            class_weights: None,
            seed: 0,
            val_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.graphs_per_batch < 1 {
            return Err(Error::Parameter("epochs and graphs_per_batch must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.decay_rate >= 0.0) {
            return Err(Error::Parameter("learning rate must be positive and decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Parameter(format!("val_frac {} outside [0, 1)", self.val_frac)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != N_CLASSES || w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Parameter(format!(
                    "class weights must be {N_CLASSES} positive values"
                )));
            }
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * (-cfg.decay_rate * epoch as f64).exp()
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if labels.iter().any(|&l| l as usize >= N_CLASSES) {
        return Err(Error::Contract("label outside 0..=3".into()));
    }
    Ok(())
}

/// Records `mean_i −W[y_i] · log P[i, y_i]` on the tape.
pub fn weighted_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    weights: &[f64],
) -> Result<Var> {
    let (n, c) = tape.value(probs).dims2()?;
    check_labels(labels, n)?;
    if weights.len() != c {
        return Err(Error::Dimension(format!("{} class weights for {c} classes", weights.len())));
    }
    let flat = tape.reshape(probs, vec![n * c, 1])?;
    let picks: std::sync::Arc<[usize]> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| i * c + y as usize)
        .collect();
    let picked = tape.gather_rows(flat, picks)?;
    let logp = tape.log(picked, T::of(PROB_FLOOR));
    let w = Tensor::new(
        vec![n, 1],
        labels.iter().map(|&y| T::of(weights[y as usize])).collect(),
    )?;
    let w = tape.constant(w);
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -T::one() / T::of(n.max(1) as f64)))
}

/// Direct evaluation of the weighted cross-entropy. Returns the loss and
/// the number of clamped probabilities.
pub fn weighted_cross_entropy_value<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    weights: &[f64],
) -> Result<(f64, usize)> {
    let (n, c) = probs.dims2()?;
    check_labels(labels, n)?;
    if weights.len() != c {
        return Err(Error::Dimension(format!("{} class weights for {c} classes", weights.len())));
    }
    let mut clamps = 0;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut p = probs.row(i)[y as usize].to_f64_lossy();
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamps += 1;
        }
        total += weights[y as usize] * p.ln();
    }
    Ok((-total / n.max(1) as f64, clamps))
}

/// Inverse class frequency over the labelled nodes, normalized to mean 1
/// over the classes present. Absent classes get weight 1.
pub fn inverse_frequency_weights<'a>(graphs: impl IntoIterator<Item = &'a Rag>) -> Vec<f64> {
    let mut counts = [0usize; N_CLASSES];
    for g in graphs {
        if let Some(l) = g.labels() {
            for &c in l {
                counts[c as usize] += 1;
            }
        }
    }
    let present: Vec<usize> = (0..N_CLASSES).filter(|&c| counts[c] > 0).collect();
    let mut w = vec![1.0; N_CLASSES];
    if present.is_empty() {
        return w;
    }
    let inv: Vec<f64> = present.iter().map(|&c| 1.0 / counts[c] as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    for (&c, &v) in present.iter().zip(&inv) {
        w[c] = v / mean;
    }
    w
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    skipped: usize,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments for parameters of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = lengths
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
            skipped: 0,
        }
    }

    pub fn for_model(model: &GatModel<T>) -> Self {
        Self::new(model.parameters().map(Tensor::len))
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Applies one bias-corrected update. Returns `false` (and leaves
    /// everything untouched) when any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<bool> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(self.eps);
        let one = T::one();
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() {
                return Err(Error::Dimension("gradient length differs from parameter".into()));
            }
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::Dimension("fewer parameters than gradients".into()));
        }
        Ok(true)
    }
}

/// Disjoint union of graphs: features stacked, edge ids offset, labels
/// concatenated. Labels are kept only if every graph has them.
pub fn batch_graphs(graphs: &[&Rag]) -> Result<Rag> {
    if graphs.len() == 1 {
        return Ok(graphs[0].clone());
    }
    let mut features = Vec::new();
    let mut edges = Vec::new();
    let mut labels = Some(Vec::new());
    let mut map = Vec::new();
    let mut offset = 0u32;
    for g in graphs {
        if g.features().len() != g.n_nodes() * FEATURE_WIDTH {
            return Err(Error::Contract("feature width mismatch in batch".into()));
        }
        features.extend_from_slice(g.features());
        edges.extend(g.edges().iter().map(|&(a, b)| (a + offset, b + offset)));
        match (labels.as_mut(), g.labels()) {
            (Some(all), Some(l)) => all.extend_from_slice(l),
            _ => labels = None,
        }
        map.extend_from_slice(g.node_to_cluster());
        offset += g.n_nodes() as u32;
    }
    Rag::new(features, edges, labels, map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub f1_wt: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub skipped_steps: usize,
    pub clamped_probs: usize,
    pub best_epoch: Option<usize>,
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,f1_wt,lr")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.epoch, r.loss, r.f1_wt, r.lr)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        crate::io::write_bytes(path, &buf)
    }
}

/// Whole-tumor F1 at node level: positives are all non-background classes.
pub fn whole_tumor_f1(pred: &[u8], truth: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    }
}

/// Forward, loss and backward on one batch. Returns the loss value,
/// the parameter gradients in [`GatModel::parameters`] order and the
/// clamp count.
pub fn loss_and_grads<T: Scalar>(
    model: &GatModel<T>,
    batch: &Rag,
    weights: &[f64],
) -> Result<(f64, Vec<Vec<T>>, usize)> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::Contract("training graph without labels".into()))?;
    let edges = EdgeIndex::for_rag(batch)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let x = tape.constant(features_tensor(batch));
    let probs = model.forward_on_tape(&mut tape, &vars, x, &edges)?;
    let loss = weighted_cross_entropy(&mut tape, probs, labels, weights)?;
    tape.backward(loss)?;
    let grads = GatModel::<T>::flatten_vars(&vars)
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
        })
        .collect();
    Ok((tape.value(loss).data()[0].to_f64_lossy(), grads, tape.log_clamps()))
}

/// Loss of `model` on a labelled graph without recording gradients.
pub fn evaluate_loss<T: Scalar>(model: &GatModel<T>, g: &Rag, weights: &[f64]) -> Result<f64> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::Contract("graph without labels".into()))?;
    let probs = model.forward_rag(g)?;
    Ok(weighted_cross_entropy_value(&probs, labels, weights)?.0)
}

/// Splits graph indices into `(train, validation)` with a seeded shuffle.
pub fn split_indices(n: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_frac).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

const SPLIT_STREAM: u64 = 0x5eed_0000_0000_0001;

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation loss (training loss when
    /// there is no validation split).
    pub best: GatModel<T>,
    /// Parameters after the last completed epoch.
    pub last: GatModel<T>,
    pub log: TrainLog,
}

pub fn train<T: Scalar>(model: GatModel<T>, data: &[Rag], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    if data.iter().any(|g| g.labels().is_none()) {
        return Err(Error::Contract("every training graph needs labels".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_frac, cfg.seed);
    let weights = match &cfg.class_weights {
        Some(w) => w.clone(),
        None => inverse_frequency_weights(train_idx.iter().map(|&i| &data[i])),
    };
    let monitor: Vec<&Rag> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| &data[i]).collect()
    } else {
        val_idx.iter().map(|&i| &data[i]).collect()
    };
    let monitor = batch_graphs(&monitor)?;
    let monitor_labels = monitor.labels().expect("checked above").to_vec();

    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::for_model(&model);
    let mut best: Option<(f64, GatModel<T>)> = None;
    let mut current = model;
    let mut order = train_idx.clone();

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut node_sum = 0usize;
        for chunk in order.chunks(cfg.graphs_per_batch) {
            let graphs: Vec<&Rag> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = batch_graphs(&graphs)?;
            let (loss, grads, clamps) = match loss_and_grads(&current, &batch, &weights) {
                Ok(r) => r,
                Err(e @ (Error::NumericFailure { .. } | Error::NonFinite { .. })) => {
                    log.aborted = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                log.aborted = Some(format!("epoch {epoch}: non-finite loss"));
                break 'epochs;
            }
            log.clamped_probs += clamps;
            if !adam.step(current.parameters_mut(), &grads, lr)? {
                log.skipped_steps += 1;
            }
            loss_sum += loss * batch.n_nodes() as f64;
            node_sum += batch.n_nodes();
        }

        let probs = match current.forward_rag(&monitor) {
            Ok(p) => p,
            Err(e @ Error::NumericFailure { .. }) => {
                log.aborted = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let (monitor_loss, _) = weighted_cross_entropy_value(&probs, &monitor_labels, &weights)?;
        let f1 = whole_tumor_f1(&argmax_rows(&probs), &monitor_labels);
        log.records.push(EpochRecord {
            epoch,
            loss: loss_sum / node_sum.max(1) as f64,
            f1_wt: f1,
            lr,
        });
        if best.as_ref().map_or(true, |(b, _)| monitor_loss < *b) {
            best = Some((monitor_loss, current.clone()));
            log.best_epoch = Some(epoch);
        }
        log::debug!("epoch {epoch}: loss {:.5} f1_wt {f1:.4}", loss_sum / node_sum.max(1) as f64);
    }

    let best = best.map(|(_, m)| m).unwrap_or_else(|| current.clone());
    Ok(TrainOutcome {
        best,
        last: current,
        log,
    })
}
