//! SGD with Nesterov momentum, the step learning-rate schedule, the
//! repetition protocol and evaluation.

use std::time::{Duration, Instant};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::nn::{argmax_rows, build_table1_network, Network, NetworkSpec};
use crate::scalar::Scalar;
use crate::shuffle::{mix_seed, repetition_seed};
use crate::tensor::DenseTensor;

/// Desk-scale preset: 32 channels, 200 train / 100 test images per class.
pub const DESK_CHANNELS: usize = 32;
pub const DESK_TRAIN_PER_CLASS: usize = 200;
pub const DESK_TEST_PER_CLASS: usize = 100;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is divided by `lr_decay_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            lr_milestones: vec![80, 110],
            lr_decay_factor: 10.0,
            total_epochs: 120,
            batch_size: 128,
            repetitions: 5,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    /// 20 epochs with decays at 12 and 17; everything else as the default.
    pub fn desk() -> Self {
        Self {
            lr_milestones: vec![12, 17],
            total_epochs: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 1.0) {
            return bad(format!("lr_decay_factor must exceed 1, got {}", self.lr_decay_factor));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_milestones {:?} must be strictly increasing", self.lr_milestones));
        }
        if let Some(&m) = self.lr_milestones.iter().find(|&&m| m >= self.total_epochs) {
            return bad(format!("milestone {m} is not below total_epochs {}", self.total_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        Ok(())
    }
}

/// `base_lr / decay^(number of milestones <= epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.base_lr / cfg.lr_decay_factor.powi(passed as i32)
}

/// One Nesterov step on every parameter:
/// `v <- mu*v - lr*g; theta <- theta + mu*v - lr*g`.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and velocities untouched.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [&mut DenseTensor<T>],
    grads: &[DenseTensor<T>],
    velocities: &mut [DenseTensor<T>],
    names: &[String],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() || params.len() != names.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities, {} names",
            params.len(),
            grads.len(),
            velocities.len(),
            names.len()
        )));
    }
    for (((p, g), v), name) in params.iter().zip(grads).zip(velocities.iter()).zip(names) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        for ((theta, &g), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = mu * *vel - lr * g;
            *theta = *theta + mu * *vel - lr * g;
        }
    }
    Ok(())
}

/// Fraction of argmax-correct rows.
pub fn accuracy_from_logits<T: Scalar>(logits: &DenseTensor<T>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Eval-mode test accuracy.
pub fn evaluate<T: Scalar>(net: &Network<T>, d: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = d.batch::<T>(chunk)?;
        let pred = argmax_rows(&net.forward_eval(&x)?);
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub repetition: usize,
    pub epoch: usize,
    /// Example-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over repetitions; 0 for a single one.
    pub std_accuracy: f64,
    pub compression_ratio: f64,
    pub wall_clock: Duration,
}

impl TrainReport {
    /// Everything except wall-clock time, which is the only field allowed to
    /// differ between identical runs.
    pub fn same_results(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.final_accuracies == other.final_accuracies
            && self.mean_accuracy.to_bits() == other.mean_accuracy.to_bits()
            && self.std_accuracy.to_bits() == other.std_accuracy.to_bits()
            && self.compression_ratio.to_bits() == other.compression_ratio.to_bits()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Batch-order seed of one epoch.
pub fn epoch_seed(rep_seed: u64, epoch: usize) -> u64 {
    mix_seed(rep_seed ^ mix_seed(epoch as u64))
}

/// Trains `net` for `cfg.total_epochs` epochs, evaluating after each one.
/// Returns the per-epoch records and the final test accuracy (the
/// initialization-time accuracy when there are no epochs).
pub fn train_network<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    repetition: usize,
    rep_seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Vec<EpochRecord>, f64)> {
    cfg.validate()?;
    net.set_exec_mode(cfg.exec);
    let names = net.param_names();
    let mut velocities: Vec<DenseTensor<T>> = net
        .named_params()
        .iter()
        .map(|(_, p)| DenseTensor::zeros(p.shape()))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut final_acc = if cfg.total_epochs == 0 { evaluate(net, test)? } else { 0.0 };

    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut loss_sum = 0.0f64;
        for batch in crate::data::batches(train, cfg.batch_size, epoch_seed(rep_seed, epoch))? {
            let (x, labels) = train.batch::<T>(&batch)?;
            let (loss, grads) = net.loss_and_grads(&x, &labels)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    repetition,
                    epoch,
                });
            }
            loss_sum += loss * batch.len() as f64;
            sgd_nesterov_step(&mut net.params_mut(), &grads, &mut velocities, &names, lr, cfg.momentum)?;
        }
        final_acc = evaluate(net, test)?;
        let rec = EpochRecord {
            repetition,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy: final_acc,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok((records, final_acc))
}

/// Output of [`train`]: the report and the network of the last repetition.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub network: Network<T>,
}

/// Runs `cfg.repetitions` independent trainings of `spec`. Repetition `k`
/// builds its network (including any shuffle permutations) from
/// `repetition_seed(cfg.seed, k)`.
pub fn train<T: Scalar>(
    spec: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let compression_ratio = spec.compression_ratio()?;
    let mut epochs = Vec::new();
    let mut finals = Vec::with_capacity(cfg.repetitions);
    let mut last = None;
    for rep in 0..cfg.repetitions {
        let seed = repetition_seed(cfg.seed, rep);
        let mut net = build_table1_network::<T>(spec, seed)?;
        let (records, acc) = train_network(&mut net, train, test, cfg, rep, seed, &mut on_epoch)?;
        epochs.extend(records);
        finals.push(acc);
        last = Some(net);
    }
    let (mean_accuracy, std_accuracy) = mean_std(&finals);
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            final_accuracies: finals,
            mean_accuracy,
            std_accuracy,
            compression_ratio,
            wall_clock: start.elapsed(),
        },
        network: last.expect("at least one repetition"),
    })
}
