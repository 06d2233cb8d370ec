//! Mini-batch training with Adam, a validation-loss plateau schedule and
//! best-validation checkpointing.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::resnet::{cross_entropy, ResNet3d};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::sampling::Instance;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    /// Per-class loss weights `[normal, anomaly]`; plain cross-entropy when
    /// absent.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            plateau_patience: 5,
            plateau_factor: 10.0,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and plateau patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.plateau_factor > 1.0) {
            return Err(Error::InvalidArgument("plateau factor must exceed 1".into()));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction (β₁ 0.9, β₂ 0.999, ε 1e-8), no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = lr as f32 / bc1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Divides the learning rate by `factor` once the monitored loss has gone
/// `patience` consecutive epochs without a relative improvement of 1e-4.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub const THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - Self::THRESHOLD) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr /= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Labelled 64³ instances addressed by index.
pub trait InstanceSource: Sync {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> Label;
    fn load(&self, i: usize) -> Result<Cow<'_, [f32]>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InstanceSource for [Instance] {
    fn len(&self) -> usize {
        <[Instance]>::len(self)
    }
    fn label(&self, i: usize) -> Label {
        self[i].label.expect("training instances carry labels")
    }
    fn load(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        Ok(Cow::Borrowed(self[i].data.data()))
    }
}

impl InstanceSource for Vec<Instance> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn label(&self, i: usize) -> Label {
        InstanceSource::label(self.as_slice(), i)
    }
    fn load(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        InstanceSource::load(self.as_slice(), i)
    }
}

impl InstanceSource for [(Vec<f32>, Label)] {
    fn len(&self) -> usize {
        <[(Vec<f32>, Label)]>::len(self)
    }
    fn label(&self, i: usize) -> Label {
        self[i].1
    }
    fn load(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        Ok(Cow::Borrowed(&self[i].0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_loss\tlr\n");
    for r in history {
        let _ = writeln!(s, "{}\t{:.8}\t{:.8}\t{:e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_to_tsv(history))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best: Checkpoint<f32>,
    pub history: Vec<EpochRecord>,
}

fn load_batch(net: &ResNet3d<f32>, src: &dyn InstanceSource, idx: &[usize]) -> Result<(super::Act<f32>, Vec<usize>)> {
    let data = idx.iter().map(|&i| src.load(i)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f32]> = data.iter().map(|d| d.as_ref()).collect();
    let x = net.batch_from(&refs)?;
    let labels = idx.iter().map(|&i| src.label(i).class_index()).collect();
    Ok((x, labels))
}

/// Mean per-instance cross-entropy in evaluation mode.
pub fn evaluate_loss(
    net: &ResNet3d<f32>,
    src: &dyn InstanceSource,
    batch_size: usize,
    class_weights: Option<[f64; 2]>,
) -> Result<f64> {
    let idx: Vec<usize> = (0..src.len()).collect();
    let w = class_weights.unwrap_or([1.0, 1.0]);
    let mut total = 0.0;
    let mut weight = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = load_batch(net, src, chunk)?;
        let logits = net.forward(&x)?;
        let (loss, _) = cross_entropy(&logits, &labels, class_weights);
        let bw: f64 = labels.iter().map(|&y| w[y]).sum();
        total += loss * bw;
        weight += bw;
    }
    Ok(total / weight)
}

pub fn train(
    net: &mut ResNet3d<f32>,
    train_set: &dyn InstanceSource,
    val_set: &dyn InstanceSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(net, train_set, val_set, cfg, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    net: &mut ResNet3d<f32>,
    train_set: &dyn InstanceSource,
    val_set: &dyn InstanceSource,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let mut adam = Adam::new(net.num_params());
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint<f32>> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = load_batch(net, train_set, chunk)?;
            let (loss, grad) = net.loss_and_grad(&x, &labels, cfg.class_weights)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, value: loss });
            }
            adam.step(net.params_mut(), &grad, lr);
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = evaluate_loss(net, val_set, cfg.batch_size, cfg.class_weights)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, value: val_loss });
        }
        let rec = EpochRecord { epoch, train_loss, val_loss, lr };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().map_or(true, |b| val_loss < b.val_loss) {
            best = Some(Checkpoint::capture(net, cfg, epoch, val_loss));
        }
        sched.step(val_loss);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        history,
    })
}
