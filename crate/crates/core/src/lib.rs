//! Ablation-based counterfactual analysis for small diffusion ensembles.
//!
//! The crate trains an ensemble of denoisers on code-assigned training
//! splits, regenerates samples under member ablation to enumerate exact
//! counterfactual landscapes, approximates those landscapes with a
//! first-order Jacobian (differential ablation), and computes attribution
//! statistics: counterfactual radius, distance ranks, visual similarity
//! ranks, and top-k intersection tests against an analytic baseline.
//!
//! Everything is deterministic given seeds: the same configuration
//! reproduces the same ensembles, samples, and reports byte for byte,
//! independent of thread count.

pub mod attribution;
pub mod codebook;
pub mod dataset;
pub mod diffabl;
pub mod diffusion;
pub mod ensemble;
pub mod io;
pub mod landscape;
pub mod metric;
pub mod retrain;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use codebook::{Codeword, CostEstimate, SourceCodebook, SplitManifest};
pub use dataset::{Dataset, NormalizationSpec};
pub use diffusion::{
    DenoiserArch, DenoiserParams, ExogenousNoise, SampleMode, Schedule, TrainConfig,
};
pub use ensemble::{AblationMask, CoefficientVector, EnsembleModel};
pub use landscape::{CounterfactualLandscape, RadiusReport, Verdict};
pub use metric::Metric;
pub use tensor::Image;
