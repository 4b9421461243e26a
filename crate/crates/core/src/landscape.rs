//! Exact counterfactual landscapes: regenerate a sample once per source
//! with that source's members ablated and the same exogenous noise, then
//! measure displacement, radius, ranks, and attributability.

use std::cell::RefCell;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, ExogenousNoise, SampleMode};
use crate::ensemble::{AblationMask, CoefficientVector, EnsembleModel};
use crate::io as bin;
use crate::metric::Metric;
use crate::stats::average_ranks;
use crate::tensor::Image;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("empty landscape")]
    EmptyLandscape,
    #[error("unknown source id {0}")]
    UnknownSource(u32),
    #[error("distance ranks need at least 2 sources, landscape has {0}")]
    DegenerateRankCount(usize),
    #[error("landscape does not keep counterfactual images")]
    ImagesNotKept,
    #[error("images are not binarized")]
    NotBinarized,
    #[error("ensemble error: {0}")]
    Ensemble(#[from] crate::ensemble::EnsembleError),
    #[error("sampling error: {0}")]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error("metric error: {0}")]
    Metric(#[from] crate::metric::MetricError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One per-source counterfactual record.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeEntry {
    pub source: u32,
    pub distance: f64,
    pub counterfactual: Option<Image>,
}

/// A factual sample plus one counterfactual (and its displacement) per
/// data source, ordered by source id.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualLandscape {
    pub factual: Image,
    pub eps_seed: u64,
    pub mode: SampleMode,
    pub metric: Metric,
    pub entries: Vec<LandscapeEntry>,
    pub approximate: bool,
    /// Threshold used to binarize both factual and counterfactuals before
    /// measuring, when the landscape lives in the discrete space.
    pub binarize_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LandscapeOptions {
    pub metric: Metric,
    pub keep_images: bool,
    pub binarize_threshold: Option<f64>,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        Self {
            metric: Metric::canonical_euclidean(),
            keep_images: false,
            binarize_threshold: None,
        }
    }
}

fn full_coefficients(e: &EnsembleModel) -> CoefficientVector {
    CoefficientVector::ones(e.len())
}

fn sample_with_coefficients(
    e: &EnsembleModel,
    coeffs: &CoefficientVector,
    eps: &ExogenousNoise,
) -> Result<Image, LandscapeError> {
    debug_assert_eq!(coeffs.len(), e.len());
    Ok(diffusion::sample(
        |x, t| {
            e.predict_weighted(coeffs, x, t)
                .expect("coefficient length pre-validated")
        },
        e.schedule(),
        eps,
        eps.mode,
    )?)
}

/// The factual sample: full ensemble, recorded noise. Bit-reproducible
/// from (ensemble, eps).
pub fn generate_factual(
    e: &EnsembleModel,
    eps: &ExogenousNoise,
) -> Result<Image, LandscapeError> {
    sample_with_coefficients(e, &full_coefficients(e), eps)
}

/// Same as `generate_factual` but records the trajectory input at every
/// ladder step; the differential-ablation Jacobian replays these states.
pub(crate) fn generate_factual_traced(
    e: &EnsembleModel,
    eps: &ExogenousNoise,
) -> Result<(Image, Vec<Image>), LandscapeError> {
    let coeffs = full_coefficients(e);
    let trace: RefCell<Vec<Image>> = RefCell::new(Vec::new());
    let out = diffusion::sample(
        |x, t| {
            trace.borrow_mut().push(x.clone());
            e.predict_weighted(&coeffs, x, t)
                .expect("coefficient length pre-validated")
        },
        e.schedule(),
        eps,
        eps.mode,
    )?;
    Ok((out, trace.into_inner()))
}

/// The counterfactual for one source: ablate S(source), replay the same
/// exogenous noise.
pub fn generate_counterfactual(
    e: &EnsembleModel,
    source: u32,
    eps: &ExogenousNoise,
) -> Result<Image, LandscapeError> {
    let mask = e.ablation_mask_for_source(source)?;
    let coeffs = crate::ensemble::mask_to_coefficients(&mask)?;
    sample_with_coefficients(e, &coeffs, eps)
}

/// Counterfactual with an explicit mask; the full mask is the sentinel
/// "ablate nothing" case and reproduces the factual bit for bit.
pub fn generate_masked(
    e: &EnsembleModel,
    mask: &AblationMask,
    eps: &ExogenousNoise,
) -> Result<Image, LandscapeError> {
    let coeffs = crate::ensemble::mask_to_coefficients(mask)?;
    sample_with_coefficients(e, &coeffs, eps)
}

/// Enumerates the full landscape: one counterfactual per source, in
/// parallel, reduced in source order. Distances are measured by `metric`
/// (after binarization when a threshold is set).
pub fn enumerate_landscape(
    e: &EnsembleModel,
    eps: &ExogenousNoise,
    opts: &LandscapeOptions,
) -> Result<CounterfactualLandscape, LandscapeError> {
    let factual = generate_factual(e, eps)?;
    let factual = match opts.binarize_threshold {
        Some(th) => factual.binarize(th),
        None => factual,
    };
    let n_sources = e.codebook().num_sources();
    let entries: Result<Vec<LandscapeEntry>, LandscapeError> = (0..n_sources)
        .into_par_iter()
        .map(|source| {
            let cf = generate_counterfactual(e, source, eps)?;
            let cf = match opts.binarize_threshold {
                Some(th) => cf.binarize(th),
                None => cf,
            };
            let distance = opts.metric.distance(&factual, &cf)?;
            Ok(LandscapeEntry {
                source,
                distance,
                counterfactual: opts.keep_images.then_some(cf),
            })
        })
        .collect();
    Ok(CounterfactualLandscape {
        factual,
        eps_seed: eps.seed,
        mode: eps.mode,
        metric: opts.metric,
        entries: entries?,
        approximate: false,
        binarize_threshold: opts.binarize_threshold,
    })
}

/// Attributability verdict relative to a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Attributable,
    NearlyUnattributable,
    Unattributable,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Attributable => "attributable",
            Verdict::NearlyUnattributable => "nearly-unattributable",
            Verdict::Unattributable => "unattributable",
        })
    }
}

/// Maximum displacement over the landscape, with the argmax source
/// (lowest id on ties).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub radius: f64,
    pub argmax_source: u32,
    pub tau: Option<f64>,
    pub verdict: Option<Verdict>,
}

pub fn counterfactual_radius(
    l: &CounterfactualLandscape,
) -> Result<RadiusReport, LandscapeError> {
    if l.entries.is_empty() {
        return Err(LandscapeError::EmptyLandscape);
    }
    let mut radius = f64::NEG_INFINITY;
    let mut argmax = 0u32;
    for entry in &l.entries {
        if entry.distance > radius {
            radius = entry.distance;
            argmax = entry.source;
        }
    }
    Ok(RadiusReport { radius, argmax_source: argmax, tau: None, verdict: None })
}

/// Radius zero in a discrete space is a certificate that no single source
/// was needed; below tau it is nearly unattributable.
pub fn classify_attributability(radius: f64, tau: f64, discrete: bool) -> Verdict {
    if discrete && radius == 0.0 {
        Verdict::Unattributable
    } else if radius < tau {
        Verdict::NearlyUnattributable
    } else {
        Verdict::Attributable
    }
}

impl RadiusReport {
    pub fn classified(mut self, tau: f64, discrete: bool) -> Self {
        self.tau = Some(tau);
        self.verdict = Some(classify_attributability(self.radius, tau, discrete));
        self
    }
}

/// Normalized rank of one source's counterfactual distance: 0 = closest
/// to the factual, 1 = farthest, ties averaged.
pub fn counterfactual_distance_rank(
    l: &CounterfactualLandscape,
    source: u32,
) -> Result<f64, LandscapeError> {
    let n = l.entries.len();
    if n < 2 {
        return Err(LandscapeError::DegenerateRankCount(n));
    }
    let idx = l
        .entries
        .iter()
        .position(|entry| entry.source == source)
        .ok_or(LandscapeError::UnknownSource(source))?;
    let distances: Vec<f64> = l.entries.iter().map(|entry| entry.distance).collect();
    let ranks = average_ranks(&distances);
    Ok(ranks[idx] / (n - 1) as f64)
}

/// All normalized distance ranks, ordered by source id.
pub fn all_distance_ranks(
    l: &CounterfactualLandscape,
) -> Result<Vec<(u32, f64)>, LandscapeError> {
    let n = l.entries.len();
    if n < 2 {
        return Err(LandscapeError::DegenerateRankCount(n));
    }
    let distances: Vec<f64> = l.entries.iter().map(|entry| entry.distance).collect();
    let ranks = average_ranks(&distances);
    Ok(l.entries
        .iter()
        .zip(ranks)
        .map(|(entry, r)| (entry.source, r / (n - 1) as f64))
        .collect())
}

/// True iff every counterfactual equals the factual exactly, bit for bit,
/// in the binarized space. Requires kept, binarized images; agrees with
/// radius = 0 under an exact-match metric.
pub fn certificate_check(l: &CounterfactualLandscape) -> Result<bool, LandscapeError> {
    if l.entries.is_empty() {
        return Err(LandscapeError::EmptyLandscape);
    }
    let binary = |img: &Image| img.data.iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(&l.factual) {
        return Err(LandscapeError::NotBinarized);
    }
    for entry in &l.entries {
        let cf = entry.counterfactual.as_ref().ok_or(LandscapeError::ImagesNotKept)?;
        if !binary(cf) {
            return Err(LandscapeError::NotBinarized);
        }
        if cf.data != l.factual.data {
            return Ok(false);
        }
    }
    Ok(true)
}

impl CounterfactualLandscape {
    /// CSV rows `source_id,distance`, ordered by source id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_id,distance\n");
        for entry in &self.entries {
            out.push_str(&format!("{},{}\n", entry.source, entry.distance));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), LandscapeError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// JSON sidecar with replay provenance and the radius verdict.
    pub fn sidecar(&self, tau: Option<f64>) -> serde_json::Value {
        let radius = counterfactual_radius(self).ok();
        let verdict = match (radius.as_ref(), tau) {
            (Some(r), Some(t)) => {
                Some(classify_attributability(r.radius, t, self.binarize_threshold.is_some()))
            }
            _ => None,
        };
        serde_json::json!({
            "factual_sha256": bin::sha256_hex(&self.factual.le_bytes()),
            "eps_seed": self.eps_seed,
            "mode": self.mode,
            "metric": self.metric.name(),
            "generator": crate::rng::GENERATOR_NAME,
            "approximate": self.approximate,
            "binarize_threshold": self.binarize_threshold,
            "radius": radius.as_ref().map(|r| r.radius),
            "argmax_source": radius.as_ref().map(|r| r.argmax_source),
            "tau": tau,
            "verdict": verdict,
        })
    }

    pub fn save_sidecar(&self, path: &Path, tau: Option<f64>) -> Result<(), LandscapeError> {
        let text = serde_json::to_string_pretty(&self.sidecar(tau)).expect("sidecar serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Optional binary blob of counterfactual images in the dataset cache
    /// format, ordered by source id.
    pub fn save_images(&self, path: &Path) -> Result<(), LandscapeError> {
        use crate::dataset::{save_cache, Dataset, Provenance};
        let mut pixels = Vec::new();
        let mut sources = Vec::new();
        for entry in &self.entries {
            let cf = entry.counterfactual.as_ref().ok_or(LandscapeError::ImagesNotKept)?;
            pixels.extend(cf.to_f32());
            sources.push(entry.source);
        }
        let ds = Dataset {
            shape: self.factual.shape,
            pixels,
            sources,
            value_range: (0.0, 1.0),
            provenance: Provenance::Synthetic,
            normalization: None,
        };
        save_cache(&ds, path).map_err(|e| {
            LandscapeError::Io(std::io::Error::other(e.to_string()))
        })
    }
}
