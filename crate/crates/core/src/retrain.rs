//! Retraining-based counterfactual (RBC) comparator: one full model plus
//! one leave-one-out model per source, trained under maximally controlled
//! conditions (shared initialization, shared minibatch order; the removed
//! source's images are replaced with uninformative all-black tensors so
//! every run performs identical optimizer steps).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{intersection_stat, AttributionRanking, IntersectionStat};
use crate::dataset::Dataset;
use crate::diffusion::{
    self, train_denoiser, Denoiser, DenoiserArch, DenoiserParams, ExogenousNoise, Schedule,
    TrainConfig,
};
use crate::tensor::Image;

#[derive(Debug, Error)]
pub enum RetrainError {
    #[error("suite guard exceeded: {sources} sources > {max} (raise the limit to override)")]
    GuardExceeded { sources: u32, max: u32 },
    #[error("unknown source id {0}")]
    UnknownSource(u32),
    #[error("training failed for {model}: {source}")]
    Training { model: String, source: diffusion::TrainError },
    #[error("sampling error: {0}")]
    Sampling(#[from] diffusion::DiffusionError),
    #[error("attribution error: {0}")]
    Attribution(#[from] crate::attribution::AttributionError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] diffusion::CheckpointError),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct RbcOptions {
    /// Leave-one-out suites train N+1 models; this guard keeps N small.
    pub max_sources: u32,
}

impl Default for RbcOptions {
    fn default() -> Self {
        Self { max_sources: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbcManifest {
    pub arch: DenoiserArch,
    pub train_config: TrainConfig,
    pub sources: u32,
    pub trainings: u64,
    /// Pixel value written over removed images: the post-normalization
    /// minimum ("all black").
    pub replacement_value: f64,
    pub replacement_policy: String,
    pub optimizer_state: String,
}

/// Full model plus per-source leave-one-out models.
pub struct RbcSuite {
    pub full: Denoiser,
    loo: Vec<Denoiser>,
    pub schedule: Schedule,
    pub manifest: RbcManifest,
}

impl RbcSuite {
    pub fn loo(&self, source: u32) -> Result<&Denoiser, RetrainError> {
        self.loo.get(source as usize).ok_or(RetrainError::UnknownSource(source))
    }

    pub fn num_sources(&self) -> u32 {
        self.loo.len() as u32
    }

    pub fn call_count(&self) -> u64 {
        self.full.call_count() + self.loo.iter().map(|m| m.call_count()).sum::<u64>()
    }

    pub fn reset_call_count(&self) {
        self.full.reset_call_count();
        for m in &self.loo {
            m.reset_call_count();
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrainError> {
        std::fs::create_dir_all(dir)?;
        self.full.params().save(&self.schedule, &dir.join("full.ckpt"))?;
        for (s, model) in self.loo.iter().enumerate() {
            model.params().save(&self.schedule, &dir.join(format!("loo_{s}.ckpt")))?;
        }
        std::fs::write(dir.join("rbc.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrainError> {
        let manifest: RbcManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("rbc.json"))?)?;
        let (full, schedule) = DenoiserParams::load(&dir.join("full.ckpt"))?;
        let mut loo = Vec::with_capacity(manifest.sources as usize);
        for s in 0..manifest.sources {
            let (params, _) = DenoiserParams::load(&dir.join(format!("loo_{s}.ckpt")))?;
            loo.push(Denoiser::new(&params));
        }
        Ok(Self { full: Denoiser::new(&full), loo, schedule, manifest })
    }
}

/// Images for one training run, with `removed` source's images replaced by
/// the all-black constant. Order and count are untouched.
fn images_with_replacement(data: &Dataset, removed: Option<u32>, black: f64) -> Vec<Image> {
    (0..data.len())
        .map(|i| {
            if Some(data.sources[i]) == removed {
                Image::from_vec(data.shape, vec![black; data.shape.len()])
            } else {
                data.image(i)
            }
        })
        .collect()
}

/// Trains the full model and one leave-one-out model per source. Every run
/// shares the initialization and minibatch schedule (same seed); optimizer
/// state is fresh per run.
pub fn train_rbc_suite(
    data: &Dataset,
    arch: DenoiserArch,
    cfg: &TrainConfig,
    sched: &Schedule,
    opts: &RbcOptions,
) -> Result<RbcSuite, RetrainError> {
    let sources = data.num_sources();
    if sources > opts.max_sources {
        return Err(RetrainError::GuardExceeded { sources, max: opts.max_sources });
    }
    let black = data.value_range.0;

    let mut jobs: Vec<Option<u32>> = vec![None];
    jobs.extend((0..sources).map(Some));
    let results: Vec<Result<DenoiserParams, RetrainError>> = jobs
        .par_iter()
        .map(|&removed| {
            let images = images_with_replacement(data, removed, black);
            train_denoiser(&images, arch, cfg, sched)
                .map(|(params, _)| params)
                .map_err(|source| RetrainError::Training {
                    model: removed.map_or("full".to_string(), |s| format!("loo_{s}")),
                    source,
                })
        })
        .collect();

    let mut params = Vec::with_capacity(results.len());
    for r in results {
        params.push(r?);
    }
    let full = Denoiser::new(&params[0]);
    let loo = params[1..].iter().map(Denoiser::new).collect();
    let manifest = RbcManifest {
        arch,
        train_config: *cfg,
        sources,
        trainings: 1 + sources as u64,
        replacement_value: black,
        replacement_policy: "all-black".to_string(),
        optimizer_state: "fresh-per-run".to_string(),
    };
    Ok(RbcSuite { full, loo, schedule: sched.clone(), manifest })
}

/// Factual sample from the full model.
pub fn rbc_factual(suite: &RbcSuite, eps: &ExogenousNoise) -> Result<Image, RetrainError> {
    Ok(diffusion::sample(
        |x, t| suite.full.forward(x, t),
        &suite.schedule,
        eps,
        eps.mode,
    )?)
}

/// Counterfactual: the leave-one-out model for `source`, same exogenous
/// noise as the factual.
pub fn rbc_counterfactual(
    suite: &RbcSuite,
    source: u32,
    eps: &ExogenousNoise,
) -> Result<Image, RetrainError> {
    let model = suite.loo(source)?;
    Ok(diffusion::sample(|x, t| model.forward(x, t), &suite.schedule, eps, eps.mode)?)
}

/// Top-k visual/counterfactual intersection counts for both paradigms over
/// a shared sample set, with the analytic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParadigmComparison {
    pub abc: IntersectionStat,
    pub rbc: IntersectionStat,
}

pub fn compare_paradigms(
    abc_reports: &[AttributionRanking],
    rbc_reports: &[AttributionRanking],
    visual_reports: &[AttributionRanking],
    k: usize,
) -> Result<ParadigmComparison, RetrainError> {
    if abc_reports.len() != visual_reports.len() || rbc_reports.len() != visual_reports.len() {
        return Err(RetrainError::Attribution(
            crate::attribution::AttributionError::MismatchedUniverse,
        ));
    }
    let abc_pairs: Vec<_> =
        visual_reports.iter().zip(abc_reports).map(|(v, c)| (v, c)).collect();
    let rbc_pairs: Vec<_> =
        visual_reports.iter().zip(rbc_reports).map(|(v, c)| (v, c)).collect();
    Ok(ParadigmComparison {
        abc: intersection_stat(&abc_pairs, k)?,
        rbc: intersection_stat(&rbc_pairs, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::diffusion::SampleMode;

    fn fixture() -> (Dataset, DenoiserArch, TrainConfig, Schedule) {
        let data = generate_synthetic(4, 8, 4, 31).unwrap();
        let arch = DenoiserArch::new(1, 2, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 17,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let sched = Schedule::new(10, 2, 1e-4, 0.02).unwrap();
        (data, arch, cfg, sched)
    }

    #[test]
    fn suite_has_full_plus_n_models() {
        let (data, arch, cfg, sched) = fixture();
        let suite =
            train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        assert_eq!(suite.num_sources(), 4);
        assert_eq!(suite.manifest.trainings, 5);
        // each LOO model differs from the full model
        for s in 0..4 {
            assert_ne!(suite.loo(s).unwrap().params(), suite.full.params());
        }
    }

    #[test]
    fn guard_rejects_large_source_counts() {
        let (data, arch, cfg, sched) = fixture();
        let err = train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions { max_sources: 3 });
        assert!(matches!(err, Err(RetrainError::GuardExceeded { sources: 4, max: 3 })));
    }

    #[test]
    fn loo_training_is_bit_reproducible() {
        let (data, arch, cfg, sched) = fixture();
        let a = train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        let b = train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        for s in 0..4 {
            assert_eq!(a.loo(s).unwrap().params(), b.loo(s).unwrap().params());
        }
        assert_eq!(a.full.params(), b.full.params());
    }

    #[test]
    fn replacing_an_already_black_source_is_a_no_op() {
        let (mut data, arch, cfg, sched) = fixture();
        // paint source 2's images black already
        let black = data.value_range.0 as f32;
        let n = data.shape.len();
        for i in 0..data.len() {
            if data.sources[i] == 2 {
                data.pixels[i * n..(i + 1) * n].fill(black);
            }
        }
        let suite =
            train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        assert_eq!(suite.loo(2).unwrap().params(), suite.full.params());
        assert_ne!(suite.loo(0).unwrap().params(), suite.full.params());
    }

    #[test]
    fn counterfactuals_replay_deterministically() {
        let (data, arch, cfg, sched) = fixture();
        let suite =
            train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        let eps = diffusion::draw_exogenous(
            7,
            &suite.schedule,
            arch.image_shape(),
            SampleMode::Deterministic,
        );
        let f1 = rbc_factual(&suite, &eps).unwrap();
        let f2 = rbc_factual(&suite, &eps).unwrap();
        assert_eq!(f1.data, f2.data);
        let c1 = rbc_counterfactual(&suite, 1, &eps).unwrap();
        let c2 = rbc_counterfactual(&suite, 1, &eps).unwrap();
        assert_eq!(c1.data, c2.data);
        assert!(rbc_counterfactual(&suite, 9, &eps).is_err());
    }

    #[test]
    fn suite_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (data, arch, cfg, sched) = fixture();
        let suite =
            train_rbc_suite(&data, arch, &cfg, &sched, &RbcOptions::default()).unwrap();
        suite.save(dir.path()).unwrap();
        let loaded = RbcSuite::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, suite.manifest);
        assert_eq!(loaded.full.params(), suite.full.params());
        for s in 0..4 {
            assert_eq!(loaded.loo(s).unwrap().params(), suite.loo(s).unwrap().params());
        }
    }

    #[test]
    fn identical_rankings_produce_equal_hits() {
        use crate::attribution::AttributionMethod;
        let mk = |order: &[u32]| AttributionRanking {
            method: AttributionMethod::Counterfactual,
            entries: order.iter().map(|&s| (s, s as f64)).collect(),
            ascending: false,
        };
        let visual = vec![mk(&[0, 1, 2, 3]), mk(&[1, 0, 3, 2])];
        let cf = vec![mk(&[0, 2, 1, 3]), mk(&[1, 3, 0, 2])];
        let cmp = compare_paradigms(&cf, &cf, &visual, 1).unwrap();
        assert_eq!(cmp.abc.hits, cmp.rbc.hits);
    }
}
