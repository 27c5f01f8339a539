//! Deterministic minibatch SGD on the mean alignment loss, and a
//! multinomial logistic-regression probe on frozen embeddings.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{augment, example_view, AugmentationSpec};
use crate::data::Dataset;
use crate::encoder::{EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::loss::{loss_at, loss_param_grad, LossKind};
use crate::par;
use crate::rng::{mix, Rng};

const STREAM_INIT: u64 = 0x1417;
const STREAM_ORDER: u64 = 0x0D0E;
const STREAM_TRAIN_VIEW: u64 = 0x7A1E;

fn default_weight_decay() -> f64 {
    0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            loss: LossKind::default(),
            augmentation: AugmentationSpec::default(),
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<EpochLoss>,
    /// Mean loss on each example's first scored view, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Initial parameters for a training run: a function of the encoder seed and
/// the training seed only.
pub fn initial_params(spec: &EncoderSpec, cfg: &TrainConfig) -> Result<EncoderParams> {
    spec.validate()?;
    EncoderParams::init(spec, &mut Rng::derive(mix(spec.seed, cfg.seed), STREAM_INIT))
}

pub fn train_ssl(spec: &EncoderSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(initial_params(spec, cfg)?, data, cfg)
}

/// SGD from explicit starting parameters. Each example gets a fresh view per
/// epoch from a stream keyed by `(seed, epoch, index)`.
pub fn train_from(mut params: EncoderParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dim() != params.input_dim() {
        return Err(Error::shape("training data", params.input_dim(), data.dim()));
    }
    if data.is_empty() {
        return Err(Error::DegenerateInput("empty training set".into()));
    }
    let initial_loss = mean_alignment_loss(&params, data, cfg.loss, &cfg.augmentation)?;
    let n = data.len();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        Rng::derive(cfg.seed, mix(STREAM_ORDER, epoch as u64)).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let view_key = mix(STREAM_TRAIN_VIEW, epoch as u64);
            let per_example = par::try_map_indexed(batch.len(), |b| {
                let i = batch[b];
                let x = data.get(i);
                let mut rng = Rng::derive(cfg.seed, mix(view_key, i as u64));
                let view = augment(&cfg.augmentation, x, &mut rng)?;
                let l = loss_at(cfg.loss, &params, x, &view.x_hat)?;
                let g = loss_param_grad(cfg.loss, &params, x, &view.x_hat)?;
                Ok((l, g))
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in &per_example {
                epoch_loss += l;
                axpy(scale, g, &mut grad);
            }
            let mut theta = params.flat().to_vec();
            if cfg.weight_decay > 0.0 {
                let snapshot = theta.clone();
                axpy(cfg.weight_decay, &snapshot, &mut grad);
            }
            axpy(-cfg.learning_rate, &grad, &mut theta);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: f64::INFINITY,
                });
            }
            params = params.with_flat(theta)?;
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean_loss });
        }
        trace.push(EpochLoss { epoch, mean_loss });
    }
    let final_loss = mean_alignment_loss(&params, data, cfg.loss, &cfg.augmentation)?;
    if !final_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        params,
        trace,
        initial_loss,
        final_loss,
    })
}

/// Mean loss over each example's first scored view.
pub fn mean_alignment_loss(p: &EncoderParams, data: &Dataset, kind: LossKind, aug: &AugmentationSpec) -> Result<f64> {
    let losses = par::try_map_indexed(data.len(), |i| {
        let x = data.get(i);
        let view = example_view(aug, x, i, 0)?;
        loss_at(kind, p, x, &view.x_hat)
    })?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

pub fn write_loss_trace<W: Write>(trace: &[EpochLoss], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "mean_loss"])?;
    for e in trace {
        out.write_record([e.epoch.to_string(), format!("{:?}", e.mean_loss)])?;
    }
    out.flush()?;
    Ok(())
}

/// L2 penalty on the probe weights (biases excluded).
pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_MAX_ITERS: usize = 10_000;
pub const PROBE_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    /// Training examples per class label.
    pub class_counts: BTreeMap<i64, usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Multinomial logistic regression on standardized frozen embeddings, by
/// full-batch gradient descent.
pub fn linear_probe(p: &EncoderParams, labeled: &Dataset, holdout: &Dataset) -> Result<ProbeResult> {
    let train_labels = labeled
        .labels()
        .ok_or_else(|| Error::Config("linear probe needs labels on the training set".into()))?;
    let holdout_labels = holdout
        .labels()
        .ok_or_else(|| Error::Config("linear probe needs labels on the holdout set".into()))?;
    let mut class_counts = BTreeMap::new();
    for &y in train_labels {
        *class_counts.entry(y).or_insert(0usize) += 1;
    }
    if class_counts.len() < 2 {
        return Err(Error::DegenerateProbe(format!(
            "training set has {} distinct class(es)",
            class_counts.len()
        )));
    }
    let classes: Vec<i64> = class_counts.keys().copied().collect();
    let class_of = |y: i64| classes.binary_search(&y).ok();

    let embed = |d: &Dataset| par::try_map_indexed(d.len(), |i| p.forward(d.get(i)));
    let mut train_x = embed(labeled)?;
    let mut hold_x = embed(holdout)?;
    let m = p.output_dim();
    let n = train_x.len();
    let mut mean = vec![0.0; m];
    for z in &train_x {
        axpy(1.0 / n as f64, z, &mut mean);
    }
    let mut sd = vec![0.0; m];
    for z in &train_x {
        for j in 0..m {
            sd[j] += (z[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    for z in train_x.iter_mut().chain(hold_x.iter_mut()) {
        for j in 0..m {
            z[j] = (z[j] - mean[j]) / sd[j];
        }
    }

    let c = classes.len();
    let stride = m + 1;
    let targets: Vec<usize> = train_labels.iter().map(|&y| class_of(y).unwrap_or(0)).collect();
    let max_sq = train_x.iter().map(|z| crate::linalg::norm_sq(z) + 1.0).fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + PROBE_L2);
    let mut w = vec![0.0; c * stride];
    let mut iterations = 0;
    let mut converged = false;
    let mut probs = vec![0.0; c];
    while iterations < PROBE_MAX_ITERS {
        let mut grad = vec![0.0; c * stride];
        for (z, &t) in train_x.iter().zip(&targets) {
            softmax(&w, z, &mut probs);
            for k in 0..c {
                let r = (probs[k] - if k == t { 1.0 } else { 0.0 }) / n as f64;
                let row = &mut grad[k * stride..(k + 1) * stride];
                axpy(r, z, &mut row[..m]);
                row[m] += r;
            }
        }
        for k in 0..c {
            for j in 0..m {
                grad[k * stride + j] += PROBE_L2 * w[k * stride + j];
            }
        }
        if crate::linalg::norm(&grad) <= PROBE_GRAD_TOL {
            converged = true;
            break;
        }
        axpy(-step, &grad, &mut w);
        iterations += 1;
    }

    let accuracy = |xs: &[Vec<f64>], ys: &[i64]| -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let mut probs = vec![0.0; c];
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(z, &y)| {
                softmax(&w, z, &mut probs);
                let best = argmax(&probs);
                class_of(y) == Some(best)
            })
            .count();
        hits as f64 / xs.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&train_x, train_labels),
        holdout_accuracy: accuracy(&hold_x, holdout_labels),
        class_counts,
        iterations,
        converged,
    })
}

fn softmax(w: &[f64], z: &[f64], out: &mut [f64]) {
    let stride = z.len() + 1;
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * stride..(k + 1) * stride];
        *o = crate::linalg::dot(&row[..z.len()], z) + row[z.len()];
    }
    let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - top).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// First index of the maximum, so ties resolve to the lowest class.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
