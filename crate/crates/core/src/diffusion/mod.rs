//! DDPM-style core: noise schedule, forward noising, a seeded record of
//! every noise tensor a sampling trajectory consumes, and a sampler that
//! replays such records exactly.

mod denoiser;
mod train;

pub use denoiser::{DenoiserArch, DenoiserParams, Denoiser, CheckpointError, EMB_DIM};
pub use train::{train_denoiser, OptimizerKind, TrainConfig, TrainError, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Image, ImageShape};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("ancestral mode requires {need} injected noises, record has {got}")]
    MissingInjectedNoise { need: usize, got: usize },
    #[error("non-finite value at sampling step {step} (t={t})")]
    NonFinite { step: usize, t: usize },
}

/// Training/sampling noise schedule with a descending sampling ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_train: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    ladder: Vec<usize>,
}

impl Schedule {
    /// K evenly spaced sampling indices (rounded, deduplicated, descending,
    /// first = t_train, last = 1), over linear betas in [beta_lo, beta_hi].
    pub fn new(
        t_train: usize,
        sample_steps: usize,
        beta_lo: f64,
        beta_hi: f64,
    ) -> Result<Self, DiffusionError> {
        if t_train < 1 || sample_steps < 1 || sample_steps > t_train {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 1 <= K <= T, got T={t_train}, K={sample_steps}"
            )));
        }
        if !(beta_lo > 0.0 && beta_lo <= beta_hi && beta_hi < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_lo <= beta_hi < 1, got ({beta_lo}, {beta_hi})"
            )));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    beta_lo
                } else {
                    beta_lo + (beta_hi - beta_lo) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect();
        let mut alphas_bar = Vec::with_capacity(t_train + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        let mut ladder = Vec::with_capacity(sample_steps);
        if sample_steps == 1 {
            ladder.push(t_train);
        } else {
            for j in 0..sample_steps {
                let v = t_train as f64
                    - j as f64 * (t_train - 1) as f64 / (sample_steps - 1) as f64;
                let v = v.round() as usize;
                if ladder.last() != Some(&v) {
                    ladder.push(v);
                }
            }
        }
        Ok(Self { t_train, beta_lo, beta_hi, betas, alphas_bar, ladder })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product of (1 - beta) up to and including t; index 0 is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    pub fn sample_steps(&self) -> usize {
        self.ladder.len()
    }
}

/// How the sampler treats injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Noise-free update; the exogenous noise is exactly (seed, x_T).
    Deterministic,
    /// DDPM-style update with recorded injected noise at every step.
    Ancestral,
}

/// Seeded record of every noise tensor one sampling trajectory consumes.
/// Replaying the record reproduces the trajectory bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousNoise {
    pub seed: u64,
    pub mode: SampleMode,
    pub x_init: Image,
    /// Per-ladder-step injected noise; empty in deterministic mode.
    pub z: Vec<Image>,
}

/// Draws the full noise record for one trajectory from a chacha8 stream.
pub fn draw_exogenous(
    seed: u64,
    sched: &Schedule,
    shape: ImageShape,
    mode: SampleMode,
) -> ExogenousNoise {
    let mut stream = rng::stream(seed);
    let mut x_init = Image::zeros(shape);
    rng::fill_normal(&mut stream, &mut x_init.data);
    let z = match mode {
        SampleMode::Deterministic => Vec::new(),
        SampleMode::Ancestral => (0..sched.sample_steps())
            .map(|_| {
                let mut img = Image::zeros(shape);
                rng::fill_normal(&mut stream, &mut img.data);
                img
            })
            .collect(),
    };
    ExogenousNoise { seed, mode, x_init, z }
}

/// q(x_t | x_0): sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_noising(
    x0: &Image,
    t: usize,
    eps: &Image,
    sched: &Schedule,
) -> Result<Image, DiffusionError> {
    if t > sched.t_train {
        return Err(DiffusionError::TimestepOutOfRange { t, max: sched.t_train });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Image::from_vec(x0.shape, data))
}

/// Runs the reverse process with the given noise predictor, consuming only
/// noise from `eps`. All accumulation is f64.
pub fn sample<P>(
    predict: P,
    sched: &Schedule,
    eps: &ExogenousNoise,
    mode: SampleMode,
) -> Result<Image, DiffusionError>
where
    P: Fn(&Image, usize) -> Image,
{
    let ladder = sched.ladder();
    if mode == SampleMode::Ancestral && eps.z.len() < ladder.len() {
        return Err(DiffusionError::MissingInjectedNoise {
            need: ladder.len(),
            got: eps.z.len(),
        });
    }
    let mut x = eps.x_init.clone();
    for (step, &t) in ladder.iter().enumerate() {
        let prev = ladder.get(step + 1).copied().unwrap_or(0);
        let e_hat = predict(&x, t);
        let a_t = sched.alpha_bar(t);
        let a_p = sched.alpha_bar(prev);
        let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let sa_p = a_p.sqrt();
        match mode {
            SampleMode::Deterministic => {
                let sb_p = (1.0 - a_p).sqrt();
                for i in 0..x.data.len() {
                    let x0 = (x.data[i] - sb_t * e_hat.data[i]) / sa_t;
                    x.data[i] = sa_p * x0 + sb_p * e_hat.data[i];
                }
            }
            SampleMode::Ancestral => {
                let sigma2 = ((1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p)).max(0.0);
                let sigma = sigma2.sqrt();
                let dir = (1.0 - a_p - sigma2).max(0.0).sqrt();
                let z = &eps.z[step];
                for i in 0..x.data.len() {
                    let x0 = (x.data[i] - sb_t * e_hat.data[i]) / sa_t;
                    x.data[i] = sa_p * x0 + dir * e_hat.data[i] + sigma * z.data[i];
                }
            }
        }
        if !x.is_finite() {
            return Err(DiffusionError::NonFinite { step, t });
        }
    }
    Ok(x)
}
