//! Losses, adaptive-moment optimizer, training loop and metrics.
//!
//! Training a scattering model never re-runs the filter cascade: the
//! coefficients of every sample are computed once up front and the loop
//! only differentiates the attention modules and head. Fusion weights are
//! clamped to [0, 1] after every update. Runs are deterministic under the
//! configured seed and the best-validation parameters are restored at the
//! end.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{unzscore, Dataset, Task};
use crate::error::{Error, Result};
use crate::model::{batch_from_samples, Layers, Model};
use crate::params::{GraphBinding, ParamKind, ParamStore};
use crate::scattering::scatter2d;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean squared error against a constant target tensor.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    g.mse_against(pred, target)
}

/// Mean binary cross-entropy from logits, stable for large magnitudes.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &Tensor<T>) -> Result<NodeId> {
    for &l in labels.data() {
        if l != T::zero() && l != T::one() {
            return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {l}")));
        }
    }
    g.bce_with_logits(logits, labels)
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adaptive moment estimation with bias correction. Fusion weights are
/// clamped to [0, 1] after every step.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    steps: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: &TrainConfig) -> Self {
        Adam {
            lr: T::of_f64(config.learning_rate),
            beta1: T::of_f64(config.beta1),
            beta2: T::of_f64(config.beta2),
            eps: T::of_f64(config.eps),
            steps: 0,
            m: store.iter().map(|(_, p)| Tensor::zeros(p.value.dims())).collect(),
            v: store.iter().map(|(_, p)| Tensor::zeros(p.value.dims())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.steps as i32);
        let c2 = one - self.beta2.powi(self.steps as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let val = p.value.data_mut();
            for k in 0..val.len() {
                m[k] = self.beta1 * m[k] + (one - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (one - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                val[k] = val[k] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if p.kind == ParamKind::FusionWeight {
                for x in val.iter_mut() {
                    *x = x.max(T::zero()).min(one);
                }
            }
        }
    }
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// None when the targets have zero variance (undefined).
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassificationMetrics {
    /// Percent correct at threshold 0.5.
    pub accuracy: f64,
    pub f1: f64,
}

/// RMSE and R^2 on un-normalized predictions and targets.
pub fn metrics_regression(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch { expected: vec![targets.len()], got: vec![preds.len()] });
    }
    let n = preds.len() as f64;
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    let mean_t: f64 = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean_t).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { Some(1.0 - ss_res / ss_tot) } else { None };
    Ok(RegressionMetrics { rmse: (ss_res / n).sqrt(), r2 })
}

/// Accuracy (percent) and F1 at threshold 0.5.
pub fn metrics_classification(probs: &[f64], labels: &[f64]) -> Result<ClassificationMetrics> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch { expected: vec![labels.len()], got: vec![probs.len()] });
    }
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let pred = p >= 0.5;
        let pos = l > 0.5;
        match (pred, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = 100.0 * (tp + tn) as f64 / probs.len() as f64;
    let denom = 2 * tp + fp + fne;
    let f1 = if denom > 0 { 2.0 * tp as f64 / denom as f64 } else { 0.0 };
    Ok(ClassificationMetrics { accuracy, f1 })
}

// ── history ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    /// Fusion weight per input channel after the epoch's updates.
    pub w1: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    /// CSV rows (epoch, split, loss, metric, w1 per channel).
    pub fn to_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let channels = self.epochs.first().map(|e| e.w1.len()).unwrap_or(0);
        let mut out = String::new();
        out.push_str("epoch,split,loss,metric");
        for c in 0..channels {
            out.push_str(&format!(",w1_{c}"));
        }
        out.push('\n');
        for e in &self.epochs {
            let w1s: String = e.w1.iter().map(|w| format!(",{w}")).collect();
            out.push_str(&format!("{},train,{},{}{}\n", e.epoch, e.train_loss, e.train_metric, w1s));
            out.push_str(&format!("{},val,{},{}{}\n", e.epoch, e.val_loss, e.val_metric, w1s));
        }
        let path = path.as_ref();
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

// ── training ─────────────────────────────────────────────────────────

/// Scattering coefficients of every sample, computed once.
fn precompute_coeffs<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<Vec<Tensor<T>>> {
    let bank = model.bank().expect("scattering backbone");
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (x, _) = ds.prepared(i)?;
        let batch = batch_from_samples::<T>(&[x])?;
        let coeffs = scatter2d(&batch, bank)?;
        let dims = coeffs.values.dims().to_vec();
        out.push(coeffs.values.reshaped(&dims[1..])?);
    }
    Ok(out)
}

/// Per-channel coefficient nodes (B, K, Hs, Ws) for a batch of samples.
fn coeff_batch_nodes<T: Real>(
    g: &mut Graph<T>,
    coeffs: &[Tensor<T>],
    indices: &[usize],
    channels: usize,
) -> Result<Vec<NodeId>> {
    let dims = coeffs[indices[0]].dims().to_vec(); // (C, K, h, w)
    let (k, h, w) = (dims[1], dims[2], dims[3]);
    let plane = k * h * w;
    let mut nodes = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&coeffs[i].data()[c * plane..(c + 1) * plane]);
        }
        let t = Tensor::from_vec(&[indices.len(), k, h, w], data)?;
        nodes.push(g.leaf(t, false)?);
    }
    Ok(nodes)
}

fn targets_tensor<T: Real>(ds: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(indices.len());
    for &i in indices {
        let (_, t) = ds.prepared(i)?;
        data.push(T::of_f64(t as f64));
    }
    Tensor::from_vec(&[indices.len(), 1], data)
}

struct BatchEval {
    loss: f64,
    preds: Vec<f64>,
    targets: Vec<f64>,
}

/// One forward pass over a batch; returns loss plus per-sample predictions
/// (probabilities for classification, normalized estimates for regression).
fn run_batch<T: Real>(
    model: &mut Model<T>,
    coeffs: Option<&[Tensor<T>]>,
    ds: &Dataset,
    indices: &[usize],
    training: bool,
    mut backprop: Option<&mut dyn FnMut(&GraphBinding, &Graph<T>) -> Result<()>>,
) -> Result<BatchEval> {
    let mut g = Graph::new();
    let bind = GraphBinding::bind_all(&mut g, &model.store)?;
    let pred = match coeffs {
        Some(cs) => {
            let nodes = coeff_batch_nodes(&mut g, cs, indices, model.config.channels)?;
            model.forward_from_coeffs(&mut g, &bind, &nodes, training)?.0
        }
        None => {
            let inputs: Result<Vec<_>> = indices.iter().map(|&i| ds.prepared(i).map(|p| p.0)).collect();
            let batch = batch_from_samples::<T>(&inputs?)?;
            let x = g.leaf(batch, false)?;
            model.forward(&mut g, &bind, x, training)?.0
        }
    };
    let tgt = targets_tensor::<T>(ds, indices)?;
    let loss = match ds.task {
        Task::Regression => mse_loss(&mut g, pred, &tgt)?,
        Task::Classification => bce_loss(&mut g, pred, &tgt)?,
    };
    let loss_val = g.real(loss)?.item()?.as_f64();
    let raw_preds: Vec<f64> = g.real(pred)?.data().iter().map(|v| v.as_f64()).collect();
    let preds = match ds.task {
        Task::Regression => raw_preds,
        Task::Classification => raw_preds.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect(),
    };
    let targets = tgt.data().iter().map(|v| v.as_f64()).collect();
    if let Some(bp) = backprop.as_mut() {
        g.backward(loss)?;
        bp(&bind, &g)?;
    }
    Ok(BatchEval { loss: loss_val, preds, targets })
}

fn metric_of(task: Task, preds: &[f64], targets: &[f64], norm: Option<(f64, f64)>) -> Result<f64> {
    match task {
        Task::Regression => {
            let (mu, sigma) = norm.unwrap_or((0.0, 1.0));
            let up: Vec<f64> = preds.iter().map(|&p| unzscore(p, mu, sigma).unwrap_or(p)).collect();
            let ut: Vec<f64> = targets.iter().map(|&t| unzscore(t, mu, sigma).unwrap_or(t)).collect();
            Ok(metrics_regression(&up, &ut)?.rmse)
        }
        Task::Classification => Ok(metrics_classification(preds, targets)?.accuracy),
    }
}

/// Trains with adaptive-moment steps, early stopping on validation loss,
/// and best-validation restore. Deterministic under `config.seed`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    if config.task != train_set.task || config.task != model.config.task {
        return Err(Error::InvalidArgument("task mismatch between config, model and data".into()));
    }
    let norm = train_set
        .norm
        .clone()
        .ok_or_else(|| Error::Dataset("training set has no normalization statistics".into()))?;
    model.data_norm = Some(norm.clone());
    let tnorm = (norm.target_mu as f64, norm.target_sigma as f64);

    let (train_coeffs, val_coeffs) = if model.is_scattering() {
        (Some(precompute_coeffs(model, train_set)?), Some(precompute_coeffs(model, val_set)?))
    } else {
        (None, None)
    };

    let mut opt = Adam::new(&model.store, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = History::default();
    let mut best_val = f64::INFINITY;
    let mut best_state: Option<(Vec<Tensor<T>>, Vec<(Vec<T>, Vec<T>)>)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut train_preds = Vec::with_capacity(train_set.len());
        let mut train_targets = Vec::with_capacity(train_set.len());
        for chunk in indices.chunks(config.batch_size) {
            let mut grads: Option<Vec<Tensor<T>>> = None;
            let eval = run_batch(
                model,
                train_coeffs.as_deref(),
                train_set,
                chunk,
                true,
                Some(&mut |bind: &GraphBinding, g: &Graph<T>| {
                    grads = Some(bind.grads(g)?);
                    Ok(())
                }),
            )?;
            step += 1;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            opt.step(&mut model.store, &grads.expect("gradients collected"));
            epoch_loss += eval.loss * chunk.len() as f64;
            seen += chunk.len();
            train_preds.extend(eval.preds);
            train_targets.extend(eval.targets);
        }
        let train_loss = epoch_loss / seen as f64;
        let train_metric = metric_of(config.task, &train_preds, &train_targets, Some(tnorm))?;

        let mut val_loss = 0.0;
        let mut val_preds = Vec::with_capacity(val_set.len());
        let mut val_targets = Vec::with_capacity(val_set.len());
        let val_indices: Vec<usize> = (0..val_set.len()).collect();
        for chunk in val_indices.chunks(config.batch_size) {
            let eval = run_batch(model, val_coeffs.as_deref(), val_set, chunk, false, None)?;
            val_loss += eval.loss * chunk.len() as f64;
            val_preds.extend(eval.preds);
            val_targets.extend(eval.targets);
        }
        val_loss /= val_set.len() as f64;
        let val_metric = metric_of(config.task, &val_preds, &val_targets, Some(tnorm))?;

        let w1 = fusion_weights(model);
        history.epochs.push(EpochRecord { epoch, train_loss, train_metric, val_loss, val_metric, w1 });

        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = epoch;
            best_state = Some((model.store.snapshot(), stats_snapshot(model)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((params, stats)) = best_state {
        model.store.restore(&params);
        restore_stats(model, &stats);
    }
    Ok(history)
}

pub fn fusion_weights<T: Real>(model: &Model<T>) -> Vec<f64> {
    match &model.layers {
        Layers::Scattering(s) => s
            .modules
            .iter()
            .map(|m| model.store.value(m.params.w1).data()[0].as_f64())
            .collect(),
        Layers::Conv(_) => Vec::new(),
    }
}

fn stats_snapshot<T: Real>(model: &Model<T>) -> Vec<(Vec<T>, Vec<T>)> {
    match &model.layers {
        Layers::Scattering(s) => s.modules.iter().map(|m| (m.stats.mean.clone(), m.stats.var.clone())).collect(),
        Layers::Conv(_) => Vec::new(),
    }
}

fn restore_stats<T: Real>(model: &mut Model<T>, snap: &[(Vec<T>, Vec<T>)]) {
    if let Layers::Scattering(s) = &mut model.layers {
        for (m, (mean, var)) in s.modules.iter_mut().zip(snap) {
            m.stats.mean = mean.clone();
            m.stats.var = var.clone();
        }
    }
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum TaskMetrics {
    Regression(RegressionMetrics),
    Classification(ClassificationMetrics),
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    /// Un-normalized predictions (regression) or probabilities
    /// (classification).
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
    pub metrics: TaskMetrics,
}

/// Eval-mode pass over a dataset with the paper-style metrics; regression
/// predictions are un-normalized before scoring.
pub fn evaluate<T: Real>(model: &mut Model<T>, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let coeffs = if model.is_scattering() { Some(precompute_coeffs(model, ds)?) } else { None };
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(ds.len());
    let mut targets = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let eval = run_batch(model, coeffs.as_deref(), ds, chunk, false, None)?;
        loss += eval.loss * chunk.len() as f64;
        preds.extend(eval.preds);
        targets.extend(eval.targets);
    }
    loss /= ds.len() as f64;
    let metrics = match ds.task {
        Task::Regression => {
            let (mu, sigma) = model
                .data_norm
                .as_ref()
                .map(|n| (n.target_mu as f64, n.target_sigma as f64))
                .or_else(|| ds.norm.as_ref().map(|n| (n.target_mu as f64, n.target_sigma as f64)))
                .ok_or_else(|| Error::Dataset("no normalization statistics for evaluation".into()))?;
            preds = preds.iter().map(|&p| unzscore(p, mu, sigma)).collect::<Result<Vec<_>>>()?;
            targets = targets.iter().map(|&t| unzscore(t, mu, sigma)).collect::<Result<Vec<_>>>()?;
            TaskMetrics::Regression(metrics_regression(&preds, &targets)?)
        }
        Task::Classification => TaskMetrics::Classification(metrics_classification(&preds, &targets)?),
    };
    Ok(EvalReport { loss, preds, targets, metrics })
}
