//! Epoch loop shared by every trainable model: deterministic shuffling,
//! per-epoch metrics, best-by-validation snapshots and early stopping.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::Record;
use crate::nn::{AdamConfig, Checkpoint};

/// Named scalars reported by a model for one batch or one pass.
pub type Metrics = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.adam.validate()
    }
}

/// The validation metric that picks the best snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub key: &'static str,
    pub higher_is_better: bool,
}

impl Selection {
    fn improves(&self, new: f64, best: Option<f64>) -> bool {
        match best {
            None => true,
            Some(b) if self.higher_is_better => new > b,
            Some(b) => new < b,
        }
    }
}

/// A model the epoch loop can drive. Models own their optimizers.
pub trait Trainable {
    fn train_batch(&mut self, data: &[&Record], rng: &mut ChaCha8Rng) -> Result<Metrics>;

    /// Deterministic evaluation (inference mode) over `data`.
    fn evaluate(&self, data: &[&Record]) -> Result<Metrics>;

    fn selection(&self) -> Selection;

    /// Weights plus optimizer state.
    fn checkpoint(&self) -> Checkpoint;

    fn restore(&mut self, ck: &Checkpoint) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: Metrics,
    pub validation: Metrics,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_value: Option<f64>,
    /// Snapshot of the best epoch; `None` when no epoch ran.
    pub best: Option<Checkpoint>,
    pub stopped_early: bool,
}

/// Noise source for one epoch: the seed picks the generator, the epoch its
/// stream, so a resumed run draws exactly what an uninterrupted one would.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Weighted mean of per-batch metrics.
#[derive(Debug, Default)]
pub struct MetricMean {
    sums: Metrics,
    weight: f64,
}

impl MetricMean {
    pub fn add(&mut self, m: &Metrics, weight: usize) {
        for (k, v) in m {
            *self.sums.entry(k.clone()).or_insert(0.0) += v * weight as f64;
        }
        self.weight += weight as f64;
    }

    pub fn mean(&self) -> Metrics {
        let w = self.weight.max(1.0);
        self.sums.iter().map(|(k, v)| (k.clone(), v / w)).collect()
    }
}

fn check_finite(m: &Metrics, what: &str) -> Result<()> {
    match m.iter().find(|(_, v)| !v.is_finite()) {
        Some((k, v)) => Err(Error::NonFinite(format!("{what}: {k} = {v}"))),
        None => Ok(()),
    }
}

/// Evaluate in chunks of `batch` items.
pub fn evaluate_chunked<M: Trainable + ?Sized>(model: &M, data: &[&Record], batch: usize) -> Result<Metrics> {
    let mut mean = MetricMean::default();
    for chunk in data.chunks(batch.max(1)) {
        mean.add(&model.evaluate(chunk)?, chunk.len());
    }
    Ok(mean.mean())
}

/// Run epochs `start_epoch + 1 ..= cfg.epochs`. `on_epoch` sees each record
/// right after it is produced (for logging and checkpointing).
pub fn fit<M: Trainable + ?Sized>(
    model: &mut M,
    train: &[&Record],
    validation: &[&Record],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &M) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let selection = model.selection();
    let mut report = FitReport {
        records: Vec::new(),
        best_epoch: None,
        best_value: None,
        best: None,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in start_epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut mean = MetricMean::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Record> = chunk.iter().map(|&i| train[i]).collect();
            let m = model.train_batch(&batch, &mut rng)?;
            check_finite(&m, &format!("epoch {epoch} training"))?;
            mean.add(&m, batch.len());
        }
        let val = if validation.is_empty() {
            Metrics::new()
        } else {
            evaluate_chunked(model, validation, cfg.batch_size.max(32))?
        };
        check_finite(&val, &format!("epoch {epoch} validation"))?;
        let record = EpochRecord {
            epoch,
            train: mean.mean(),
            validation: val,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        let score = record
            .validation
            .get(selection.key)
            .or_else(|| record.train.get(selection.key))
            .copied();
        if let Some(s) = score {
            if selection.improves(s, report.best_value) {
                report.best_value = Some(s);
                report.best_epoch = Some(epoch);
                report.best = Some(model.checkpoint());
            }
        }
        on_epoch(&record, model)?;
        report.records.push(record);
        if let (Some(p), Some(best)) = (cfg.patience, report.best_epoch) {
            if epoch - best >= p {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Fraction of positions where `pred` equals `truth`.
pub fn pixel_accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = epoch_rng(3, 1).random();
        let b: u64 = epoch_rng(3, 2).random();
        assert_ne!(a, b);
        assert_eq!(a, epoch_rng(3, 1).random::<u64>());
    }

    #[test]
    fn metric_mean_is_weighted() {
        let mut m = MetricMean::default();
        m.add(&Metrics::from([("x".to_string(), 1.0)]), 3);
        m.add(&Metrics::from([("x".to_string(), 5.0)]), 1);
        assert_eq!(m.mean()["x"], 2.0);
    }

    #[test]
    fn selection_direction() {
        let up = Selection {
            key: "acc",
            higher_is_better: true,
        };
        assert!(up.improves(0.5, None));
        assert!(up.improves(0.6, Some(0.5)));
        assert!(!up.improves(0.5, Some(0.5)));
        let down = Selection {
            key: "l1",
            higher_is_better: false,
        };
        assert!(down.improves(0.1, Some(0.2)));
    }
}
