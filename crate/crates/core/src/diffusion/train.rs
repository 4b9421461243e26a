//! Deterministic single-denoiser training: fixed init, fixed minibatch
//! order, fixed noise draws, all keyed off one seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::denoiser::{backward, forward_cached, DenoiserArch, DenoiserParams};
use super::{forward_noising, Schedule};
use crate::rng;
use crate::tensor::Image;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training split")]
    EmptySplit,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: u32, step: usize },
    #[error("image shape does not match architecture")]
    ShapeMismatch,
    #[error("schedule error: {0}")]
    Schedule(#[from] super::DiffusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub dropout: f64,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss curve and bookkeeping from one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared error per optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let second = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            lr,
            m: vec![0.0; dim],
            v: if second { vec![0.0; dim] } else { Vec::new() },
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for i in 0..params.len() {
                    self.m[i] = momentum * self.m[i] - self.lr * grads[i];
                    params[i] += self.m[i];
                }
            }
        }
    }
}

/// Trains a denoiser to predict the added noise (MSE over uniformly drawn
/// timesteps). Deterministic given `cfg.seed`; zero epochs returns the
/// seeded initialization unchanged.
pub fn train_denoiser(
    images: &[Image],
    arch: DenoiserArch,
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<(DenoiserParams, TrainReport), TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    cfg.validate()?;
    if images.iter().any(|img| img.shape != arch.image_shape()) {
        return Err(TrainError::ShapeMismatch);
    }

    let init = DenoiserParams::init(arch, cfg.seed);
    let mut params = init.to_f64();
    let dim = params.len();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, dim);
    let mut stream = rng::stream(rng::derive_seed(cfg.seed, 0x7241));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut grads = vec![0.0; dim];
    let mut losses = Vec::new();
    let pixels = arch.image_shape().len();

    for epoch in 0..cfg.epochs {
        // fixed-seed shuffle per epoch
        for i in (1..order.len()).rev() {
            let j = stream.random_range(0..=i as u64) as usize;
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let mut loss_acc = 0.0;
            let denom = (batch.len() * pixels) as f64;
            for &idx in batch {
                let t = stream.random_range(1..=sched.t_train as u64) as usize;
                let mut eps = Image::zeros(arch.image_shape());
                rng::fill_normal(&mut stream, &mut eps.data);
                let noisy = forward_noising(&images[idx], t, &eps, sched)?;
                let dropout = if cfg.dropout > 0.0 {
                    Some((cfg.dropout, &mut stream))
                } else {
                    None
                };
                let caches = forward_cached(&arch, &params, &noisy.data, t, dropout);
                let mut dout = vec![0.0; pixels];
                for i in 0..pixels {
                    let r = caches.out[i] - eps.data[i];
                    loss_acc += r * r;
                    dout[i] = 2.0 * r / denom;
                }
                backward(&arch, &params, &caches, &dout, &mut grads);
            }
            let loss = loss_acc / denom;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step: losses.len() });
            }
            losses.push(loss);
            opt.step(&mut params, &grads);
        }
    }

    let steps = losses.len();
    Ok((DenoiserParams::from_f64(arch, &params), TrainReport { losses, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(count: usize) -> (DenoiserArch, Vec<Image>, Schedule) {
        let arch = DenoiserArch::new(1, 4, 8).unwrap();
        let base: Vec<f64> =
            (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.8 } else { -0.6 }).collect();
        let img = Image::from_vec(arch.image_shape(), base);
        let sched = Schedule::new(50, 10, 1e-4, 0.02).unwrap();
        (arch, vec![img; count], sched)
    }

    fn cfg(epochs: u32) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 5,
            optimizer: OptimizerKind::default(),
            dropout: 0.0,
        }
    }

    #[test]
    fn loss_halves_on_identical_images() {
        // the trainer is its own oracle: record first and last step losses
        let (arch, images, sched) = fixture(16);
        let (_, report) = train_denoiser(&images, arch, &cfg(200), &sched).unwrap();
        assert_eq!(report.steps, 200);
        let first = report.losses[0];
        let last = *report.losses.last().unwrap();
        assert!(
            last <= 0.5 * first,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn windowed_means_do_not_increase() {
        let (arch, images, sched) = fixture(16);
        let (_, report) = train_denoiser(&images, arch, &cfg(200), &sched).unwrap();
        let window = 50;
        let means: Vec<f64> = report
            .losses
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for pair in means.windows(2) {
            assert!(pair[1] <= pair[0], "window means increased: {pair:?}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (arch, images, sched) = fixture(8);
        let (a, _) = train_denoiser(&images, arch, &cfg(3), &sched).unwrap();
        let (b, _) = train_denoiser(&images, arch, &cfg(3), &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (arch, images, sched) = fixture(4);
        let (params, report) = train_denoiser(&images, arch, &cfg(0), &sched).unwrap();
        assert_eq!(params, DenoiserParams::init(arch, 5));
        assert!(report.losses.is_empty());
    }

    #[test]
    fn sgd_and_dropout_paths_run() {
        let (arch, images, sched) = fixture(8);
        let mut c = cfg(2);
        c.optimizer = OptimizerKind::Sgd { momentum: 0.9 };
        c.dropout = 0.1;
        let (params, _) = train_denoiser(&images, arch, &c, &sched).unwrap();
        assert!(params.is_finite());
    }

    #[test]
    fn empty_split_is_an_error() {
        let (arch, _, sched) = fixture(1);
        assert!(matches!(
            train_denoiser(&[], arch, &cfg(1), &sched),
            Err(TrainError::EmptySplit)
        ));
    }

    #[test]
    fn divergent_learning_rate_reports_epoch() {
        let (arch, images, sched) = fixture(8);
        let mut c = cfg(50);
        c.optimizer = OptimizerKind::Sgd { momentum: 0.0 };
        c.learning_rate = 1e9;
        match train_denoiser(&images, arch, &c, &sched) {
            Err(TrainError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
