//! Rank statistics, correlations, and the analytic intersection baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

/// Average (fractional) 0-based ranks; ties share the mean of the positions
/// they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Product-moment correlation. Zero variance on either side is flagged as
/// degenerate rather than returning NaN.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(StatsError::Degenerate("zero variance"));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: xs.len() });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Ordinary least squares fit with a seeded two-sided permutation test on
/// the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Fraction of label permutations whose |slope| reached the observed
    /// |slope|.
    pub p_perm: f64,
}

pub fn ols_with_permutation(
    xs: &[f64],
    ys: &[f64],
    permutations: u32,
    seed: u64,
) -> Result<OlsFit, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew { need: 3, got: xs.len() });
    }
    let (slope, intercept, r2) = ols(xs, ys)?;
    let mut rng = rng::stream(seed);
    let mut perm: Vec<f64> = ys.to_vec();
    let mut exceed = 0u32;
    for _ in 0..permutations {
        shuffle(&mut perm, &mut rng);
        let (s, _, _) = ols(xs, &perm)?;
        if s.abs() >= slope.abs() {
            exceed += 1;
        }
    }
    let p_perm =
        if permutations == 0 { 1.0 } else { exceed as f64 / permutations as f64 };
    Ok(OlsFit { slope, intercept, r2, p_perm })
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), StatsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::Degenerate("all x values equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, intercept, r2))
}

fn shuffle(values: &mut [f64], rng: &mut rng::Stream) {
    use rand::Rng;
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        values.swap(i, j);
    }
}

/// Expected top-k intersection count if attribution were uniform noise:
/// each of the k picks independently misses a fixed k-subset of the N
/// sources with probability (N-k)/N, so one trial intersects with
/// p = 1 - ((N-k)/N)^k. Over `trials` independent samples the hit count is
/// binomial; this reproduces the reference mean 158.73 / sd 11.58 at
/// (N, k, trials) = (384, 8, 1024).
pub fn intersection_baseline(n_sources: u64, k: u64, trials: u64) -> (f64, f64) {
    assert!(k <= n_sources, "k exceeds source count");
    let miss = (n_sources - k) as f64 / n_sources as f64;
    let p = 1.0 - miss.powi(k as i32);
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    (mean, sd)
}
