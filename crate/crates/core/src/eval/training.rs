//! Mini-batch training of the learned extractor with AdamW and a cosine schedule.

use crate::features::network::{batch_loss, forward_backward, PairBatch};
use crate::features::ExtractorParams;
use crate::image::Image;
use crate::objective::LossConfig;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Peak step size, decayed by a half cosine to zero over all steps.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("optimizer rates out of range".into()));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("optimizer epsilon/decay out of range".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub ground: Image,
    pub reference: Image,
    pub gt_bin: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean batch loss per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon) + cfg.weight_decay * *p;
            *p -= lr * update;
        }
    }
}

fn make_batch(pairs: &[TrainingPair], idx: &[usize]) -> PairBatch {
    PairBatch {
        ground: idx.iter().map(|&i| pairs[i].ground.clone()).collect(),
        reference: idx.iter().map(|&i| pairs[i].reference.clone()).collect(),
        gt_bins: idx.iter().map(|&i| pairs[i].gt_bin).collect(),
    }
}

/// Trains `initial` on `pairs`. With `checkpoint_dir`, writes
/// `epoch-NNN.json` after every epoch.
pub fn train(
    pairs: &[TrainingPair],
    initial: ExtractorParams,
    loss: &LossConfig,
    opt: &OptimizerConfig,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<(ExtractorParams, TrainingReport)> {
    opt.validate()?;
    loss.validate()?;
    if pairs.len() < 2 {
        return Err(Error::BatchTooSmall(pairs.len()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut params = initial;
    let mut adam = AdamW::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    // a trailing single pair cannot form in-batch negatives and is skipped
    let batches_per_epoch = pairs.len() / opt.batch_size + usize::from(pairs.len() % opt.batch_size >= 2);
    let total = batches_per_epoch * opt.epochs;
    let mut report = TrainingReport::default();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(opt.batch_size).filter(|c| c.len() >= 2) {
            let batch = make_batch(pairs, chunk);
            let (value, grads) = match forward_backward(&batch, &params, loss) {
                Ok(r) => r,
                Err(Error::NonFiniteGradient(_)) | Err(Error::NonFiniteActivation(_)) | Err(Error::ZeroFeature) => {
                    return Err(Error::DivergedLoss { epoch, step })
                }
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(Error::DivergedLoss { epoch, step });
            }
            let lr = cosine_lr(opt.learning_rate, step, total);
            adam.step(params.values_mut(), &grads, lr, opt);
            report.step_losses.push(value);
            report.learning_rates.push(lr);
            epoch_sum += value;
            epoch_batches += 1;
            step += 1;
        }
        report.epoch_losses.push(epoch_sum / epoch_batches.max(1) as f64);
        if let Some(dir) = checkpoint_dir {
            params.save(dir.join(format!("epoch-{:03}.json", epoch + 1)))?;
        }
    }
    Ok((params, report))
}

/// Mean batch loss over `pairs` in fixed order, without updating anything.
pub fn evaluate_loss(pairs: &[TrainingPair], params: &ExtractorParams, loss: &LossConfig, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in idx.chunks(batch_size.max(2)).filter(|c| c.len() >= 2) {
        sum += batch_loss(&make_batch(pairs, chunk), params, loss)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::BatchTooSmall(pairs.len()));
    }
    Ok(sum / n as f64)
}
