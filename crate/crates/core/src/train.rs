//! Minibatch SGD with momentum, plus split evaluation.

use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::metrics::MetricsReport;
use crate::model::{decide, Decision, RmfnModel};
use crate::params::ParamStore;
use crate::synth::{Dataset, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step: for every parameter,
/// momentum <- momentum_coeff * momentum + grad, value <- value - lr * momentum.
/// Gradients are cleared afterwards so the next batch starts fresh.
pub fn sgd_step(store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
    for (name, p) in store.iter_mut() {
        let crate::params::Param {
            value,
            grad,
            momentum,
        } = p;
        for (m, &g) in momentum.data_mut().iter_mut().zip(grad.data()) {
            *m = cfg.momentum * *m + g;
        }
        for (v, &m) in value.data_mut().iter_mut().zip(momentum.data()) {
            *v -= cfg.learning_rate * m;
        }
        value.ensure_finite(name)?;
        grad.data_mut().fill(0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

fn correct(logits: &crate::tensor::Tensor, label: u8) -> Result<bool> {
    let positive = decide(logits)? == Decision::Positive;
    Ok(positive == (label == 1))
}

/// Trains in place over the dataset's train split, evaluating on the test
/// split after every epoch. `on_epoch` fires once per finished epoch, in
/// order. Shuffling and dropout draw from fixed RNG streams of
/// `cfg.seed`, so a run is fully determined by (model, dataset, config).
pub fn train(
    model: &mut RmfnModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("training needs a non-empty train split".into()));
    }
    if data.indices(Split::Test).is_empty() {
        return Err(Error::Data("training needs a non-empty test split".into()));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut order = train_idx;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let upstream_scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let image = data.image_tensor(i);
                let label = data.item(i).label;
                let pass = model.forward(&image, Mode::Train, &mut dropout_rng)?;
                let (loss, mut grad_logits) = softmax_cross_entropy(&pass.logits, label as usize)?;
                grad_logits.scale(upstream_scale);
                model.backward(&pass.cache, &grad_logits)?;
                loss_sum += loss;
                if correct(&pass.logits, label)? {
                    hits += 1;
                }
            }
            sgd_step(&mut model.params, cfg)?;
        }
        let test = evaluate(model, data, Split::Test)?;
        let entry = EpochStats {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: hits as f64 / order.len() as f64,
            test_acc: test.accuracy.expect("non-empty test split"),
        };
        on_epoch(&entry);
        stats.push(entry);
    }
    Ok(stats)
}

/// Confusion-matrix metrics of the model over one split (label 1 is the
/// positive class).
pub fn evaluate(model: &RmfnModel, data: &Dataset, split: Split) -> Result<MetricsReport> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!(
            "the {} split is empty",
            split.as_str()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for i in idx {
        let (logits, _) = model.infer(&data.image_tensor(i))?;
        let positive = decide(&logits)? == Decision::Positive;
        match (data.item(i).label == 1, positive) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}

/// Tab-separated epoch trace, one row per epoch.
pub fn write_trace(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch\ttrain_loss\ttrain_acc\ttest_acc")?;
    for s in stats {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            s.epoch, s.train_loss, s.train_acc, s.test_acc
        )?;
    }
    out.flush()?;
    Ok(())
}
