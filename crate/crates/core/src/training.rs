//! SGD with momentum and weight decay, plateau learning-rate schedule, early
//! stopping with a minimum-epoch floor, and the epoch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureTensor, Geometry, CHANNELS};
use crate::identification::top1_accuracy;
use crate::losses::{loss_forward_backward, LossConfig, LossFamily};
use crate::nn::{Checkpoint, HeadKind, Mode, Model, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub early_stop_patience: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            early_stop_patience: 15,
            min_epochs: 30,
            max_epochs: 120,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.plateau_threshold >= 0.0 && self.plateau_threshold.is_finite()) {
            return bad("plateau_threshold must be non-negative");
        }
        if self.min_epochs > self.max_epochs {
            return bad("min_epochs must not exceed max_epochs");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub lr: f64,
}

/// One line per epoch: `epoch, train_loss, val_loss, val_top1, lr`, tab-separated.
pub fn format_log(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.val_loss, r.val_top1, r.lr).unwrap();
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let err = || Error::Parse(format!("training log line {}: {line:?}", i + 1));
            if f.len() != 5 {
                return Err(err());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| err())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                val_top1: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Scalar> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// `v = momentum * v + (grad + weight_decay * param)`, `param -= lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {i} has shape {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    }
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let lr = T::from_f64_lossy(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *pi);
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Tracks the best validation loss under the rule `val < best - threshold`.
#[derive(Debug, Clone, Copy)]
struct BestTracker {
    best: f64,
    bad: usize,
    threshold: f64,
}

impl BestTracker {
    fn new(threshold: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad: 0,
            threshold,
        }
    }

    fn observe(&mut self, val: f64) {
        if val < self.best - self.threshold {
            self.best = val;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
    }
}

/// Multiplies the learning rate by `plateau_factor` once more than
/// `plateau_patience` consecutive epochs fail to improve, then restarts the count.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    tracker: BestTracker,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr0,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            tracker: BestTracker::new(cfg.plateau_threshold),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        self.tracker.observe(val_loss);
        if self.tracker.bad > self.patience {
            self.lr *= self.factor;
            self.tracker.bad = 0;
        }
        self.lr
    }
}

/// Learning rate in effect after each epoch of `history`.
pub fn plateau_scheduler(history: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let mut s = PlateauScheduler::new(cfg);
    history.iter().map(|&v| s.observe(v)).collect()
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_epochs: usize,
    tracker: BestTracker,
}

impl EarlyStopping {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            patience: cfg.early_stop_patience,
            min_epochs: cfg.min_epochs,
            tracker: BestTracker::new(cfg.plateau_threshold),
        }
    }

    /// Feeds the validation loss of 1-based `epoch`; true means stop after it.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        self.tracker.observe(val_loss);
        epoch >= self.min_epochs && self.tracker.bad >= self.patience
    }
}

/// Stop decision after each epoch of `history` (epochs numbered from 1).
pub fn early_stop(history: &[f64], cfg: &TrainConfig) -> Vec<bool> {
    let mut s = EarlyStopping::new(cfg);
    history.iter().enumerate().map(|(i, &v)| s.observe(i + 1, v)).collect()
}

/// Labelled feature images sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    features: Vec<FeatureTensor>,
    labels: Vec<usize>,
}

impl Examples {
    pub fn new(features: Vec<FeatureTensor>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!("{} features but {} labels", features.len(), labels.len())));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.geometry() != first.geometry()) {
                return Err(Error::Shape("examples mix feature geometries".into()));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[FeatureTensor] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.features.first().map(|f| f.geometry())
    }

    /// `[len(indices), 3, H, W]` batch in the network's channel-major layout.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let g = self
            .geometry()
            .ok_or_else(|| Error::Argument("cannot batch an empty example set".into()))?;
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * g.height() * g.width());
        for &i in indices {
            data.extend(self.features[i].to_chw());
        }
        Tensor::new(&[indices.len(), CHANNELS, g.height(), g.width()], data)
    }
}

/// Evaluation-mode embeddings for every example, `[len, embedding_dim]`.
pub fn embed_examples(model: &Model<f32>, examples: &Examples, batch_size: usize) -> Result<Tensor<f32>> {
    let n = examples.len();
    let d = model.config().embedding_dim;
    let mut out = Vec::with_capacity(n * d);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend_from_slice(model.forward_embed(&examples.batch(chunk)?)?.data());
    }
    Tensor::new(&[n, d], out)
}

pub fn head_for(family: LossFamily) -> HeadKind {
    if family.uses_cosine_head() {
        HeadKind::Cosine
    } else {
        HeadKind::Dense
    }
}

fn head_tensors(model: &Model<f32>) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let w = model.param("head.weight").expect("head weight exists").cast::<f64>();
    let b = model.param("head.bias").map(|b| b.cast::<f64>());
    (w, b)
}

/// Mean loss (with margin) and top-1 (margin-free scores) over a split.
pub fn evaluate_split(model: &Model<f32>, loss: &LossConfig, examples: &Examples, batch_size: usize) -> Result<(f64, f64)> {
    let emb = embed_examples(model, examples, batch_size)?;
    let (w, b) = head_tensors(model);
    let out = loss_forward_backward(loss, &emb.cast::<f64>(), &w, b.as_ref(), examples.labels())?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    let top1 = top1_accuracy(&model.head_scores(&emb)?, examples.labels())?;
    Ok((out.loss, top1))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub records: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.best);
        ck.metadata.insert("best_epoch".into(), self.best_epoch.to_string());
        ck.metadata.insert("best_val_loss".into(), self.best_val_loss.to_string());
        ck
    }
}

/// Runs seeded mini-batch SGD until early stopping or `max_epochs`.
pub fn train(
    mut model: Model<f32>,
    loss: &LossConfig,
    cfg: &TrainConfig,
    train_set: &Examples,
    val_set: &Examples,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must both be non-empty".into()));
    }
    if train_set.geometry() != val_set.geometry() {
        return Err(Error::Config("training and validation features differ in geometry".into()));
    }
    let k = model.config().num_classes;
    if loss.num_classes != k {
        return Err(Error::Config(format!("loss has {} classes, network has {k}", loss.num_classes)));
    }
    if model.head() != head_for(loss.family) {
        return Err(Error::Config(format!("{} loss needs a {} head", loss.family, head_for(loss.family))));
    }
    let mut seen = vec![false; k];
    for &y in train_set.labels().iter().chain(val_set.labels()) {
        *seen.get_mut(y).ok_or(Error::LabelOutOfRange { label: y, classes: k })? = true;
    }
    seen.fill(false);
    train_set.labels().iter().for_each(|&y| seen[y] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("class {missing} has no training examples")));
    }

    let w_idx = model.param_index("head.weight").expect("head weight exists");
    let b_idx = model.param_index("head.bias");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = SgdState::new();
    let mut sched = PlateauScheduler::new(cfg);
    let mut stopper = EarlyStopping::new(cfg);
    let mut records = Vec::new();
    let mut best: Option<(Model<f32>, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.batch(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let cache = model.forward_train(&x, Mode::Train { dropout_seed: rng.next_u64() })?;
            let (w, b) = head_tensors(&model);
            let out = loss_forward_backward(loss, &cache.embeddings.cast::<f64>(), &w, b.as_ref(), &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += out.loss * batch.len() as f64;
            let mut grads = model.backward(&cache, &out.grad_embeddings.cast::<f32>())?;
            grads[w_idx] = out.grad_weights.cast();
            if let (Some(i), Some(gb)) = (b_idx, out.grad_bias.as_ref()) {
                grads[i] = gb.cast();
            }
            sgd_step(model.params_mut(), &grads, &mut sgd, lr, cfg)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
            model.renormalize_head();
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_top1) = evaluate_split(&model, loss, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_top1,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.5} val_loss {val_loss:.5} val_top1 {val_top1:.4} lr {lr:e}"
        );
        records.push(rec);
        if best.as_ref().is_none_or(|(_, _, v)| val_loss < *v) {
            best = Some((model.clone(), epoch, val_loss));
        }
        sched.observe(val_loss);
        if stopper.observe(epoch, val_loss) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        records,
    })
}
