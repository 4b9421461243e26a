//! Member denoisers combined into one model: coefficient-weighted
//! prediction, ablation masks from the codebook, parallel member training,
//! and directory persistence.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{splits_from_codebook, SourceCodebook};
use crate::dataset::Dataset;
use crate::diffusion::{
    train_denoiser, Denoiser, DenoiserArch, DenoiserParams, Schedule, TrainConfig, TrainReport,
};
use crate::tensor::{tree_sum_into, Image};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("coefficient vector length {got} does not match member count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("ablation mask keeps no members")]
    EmptyMask,
    #[error("unknown source id {0}")]
    UnknownSource(u32),
    #[error("codebook weight {w} must be below member count {n} for ablation")]
    WeightTooLarge { n: u32, w: u32 },
    #[error("member {index} failed to train: {source}")]
    MemberTraining { index: usize, source: crate::diffusion::TrainError },
    #[error("codebook error: {0}")]
    Codebook(#[from] crate::codebook::CodebookError),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::diffusion::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-member combination coefficients c; the model computes
/// sum_i f_i(x) * c_i / n.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keep flags per member; at least one member must survive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationMask(pub Vec<bool>);

impl AblationMask {
    pub fn full(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }
}

/// c_i = n / |kept| for kept members, 0 for ablated ones, so the weighted
/// combination equals the arithmetic mean over kept members.
pub fn mask_to_coefficients(mask: &AblationMask) -> Result<CoefficientVector, EnsembleError> {
    let kept = mask.kept();
    if kept == 0 {
        return Err(EnsembleError::EmptyMask);
    }
    let n = mask.0.len() as f64;
    let value = n / kept as f64;
    Ok(CoefficientVector(
        mask.0.iter().map(|&k| if k { value } else { 0.0 }).collect(),
    ))
}

/// Ordered member denoisers sharing one architecture, schedule, and
/// codebook.
pub struct EnsembleModel {
    members: Vec<Denoiser>,
    schedule: Schedule,
    codebook: SourceCodebook,
    pub manifest: EnsembleManifest,
}

/// Training provenance for an ensemble directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub arch: DenoiserArch,
    pub train_config: TrainConfig,
    /// Seed actually used per member: train_config.seed XOR member index.
    pub member_seeds: Vec<u64>,
    pub split_sizes: Vec<usize>,
    pub trainings: u64,
    /// Value range of the training data, shared by every member.
    pub value_range: (f64, f64),
    #[serde(default)]
    pub member_files: Vec<String>,
    #[serde(default)]
    pub codebook_file: String,
}

impl EnsembleModel {
    pub fn from_parts(
        members: Vec<DenoiserParams>,
        schedule: Schedule,
        codebook: SourceCodebook,
        manifest: EnsembleManifest,
    ) -> Self {
        assert_eq!(members.len(), codebook.members() as usize, "member/codebook mismatch");
        let members = members.iter().map(Denoiser::new).collect();
        Self { members, schedule, codebook, manifest }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn codebook(&self) -> &SourceCodebook {
        &self.codebook
    }

    pub fn member(&self, i: usize) -> &Denoiser {
        &self.members[i]
    }

    pub fn image_shape(&self) -> crate::tensor::ImageShape {
        self.manifest.arch.image_shape()
    }

    /// Total member forward evaluations since the last reset.
    pub fn call_count(&self) -> u64 {
        self.members.iter().map(|m| m.call_count()).sum()
    }

    pub fn reset_call_count(&self) {
        for m in &self.members {
            m.reset_call_count();
        }
    }

    /// The weighted combination sum_i f_i(x) c_i / n. Members with a zero
    /// coefficient are not evaluated. Scaled outputs are reduced with a
    /// balanced pairwise tree over ascending member index, so the result
    /// is independent of scheduling.
    pub fn predict_weighted(
        &self,
        c: &CoefficientVector,
        x: &Image,
        t: usize,
    ) -> Result<Image, EnsembleError> {
        if c.len() != self.members.len() {
            return Err(EnsembleError::LengthMismatch {
                got: c.len(),
                expected: self.members.len(),
            });
        }
        let n = self.members.len() as f64;
        let terms: Vec<Vec<f64>> = self
            .members
            .iter()
            .zip(&c.0)
            .filter(|(_, &ci)| ci != 0.0)
            .map(|(member, &ci)| {
                let scale = ci / n;
                let mut out = member.forward(x, t).data;
                for v in &mut out {
                    *v *= scale;
                }
                out
            })
            .collect();
        let mut out = Image::zeros(x.shape);
        if terms.is_empty() {
            return Ok(out);
        }
        tree_sum_into(&terms, &mut out.data);
        Ok(out)
    }

    /// Arithmetic mean over kept members. Delegates to the weighted kernel
    /// with mask coefficients, so the two paths agree bit for bit.
    pub fn predict_mean(
        &self,
        mask: &AblationMask,
        x: &Image,
        t: usize,
    ) -> Result<Image, EnsembleError> {
        if mask.0.len() != self.members.len() {
            return Err(EnsembleError::LengthMismatch {
                got: mask.0.len(),
                expected: self.members.len(),
            });
        }
        self.predict_weighted(&mask_to_coefficients(mask)?, x, t)
    }

    /// Drops exactly the members that trained on `source`: keep_i = false
    /// iff i is in S(source). Requires codeword weight below n so at least
    /// one member survives.
    pub fn ablation_mask_for_source(&self, source: u32) -> Result<AblationMask, EnsembleError> {
        let cb = &self.codebook;
        if cb.weight() >= cb.members() {
            return Err(EnsembleError::WeightTooLarge { n: cb.members(), w: cb.weight() });
        }
        let cw = cb
            .codeword(source)
            .map_err(|_| EnsembleError::UnknownSource(source))?;
        Ok(AblationMask((0..cb.members()).map(|i| !cw.bit(i)).collect()))
    }

    /// Saves `ensemble.json` plus one checkpoint per member and the
    /// codebook into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        manifest.member_files.clear();
        for (i, member) in self.members.iter().enumerate() {
            let name = format!("member_{i:02}.ckpt");
            member.params().save(&self.schedule, &dir.join(&name))?;
            manifest.member_files.push(name);
        }
        manifest.codebook_file = "codebook.json".to_string();
        self.codebook.save(&dir.join(&manifest.codebook_file))?;
        std::fs::write(dir.join("ensemble.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let manifest: EnsembleManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("ensemble.json"))?)?;
        let codebook = SourceCodebook::load(&dir.join(&manifest.codebook_file))?;
        let mut members = Vec::with_capacity(manifest.member_files.len());
        let mut schedule = None;
        for name in &manifest.member_files {
            let (params, sched) = DenoiserParams::load(&dir.join(name))?;
            schedule.get_or_insert(sched);
            members.push(params);
        }
        let schedule = schedule.expect("ensemble has at least one member");
        Ok(Self::from_parts(members, schedule, codebook, manifest))
    }
}

/// Trains member `i` on split `i` with seed `cfg.seed ^ i`. Members train
/// in parallel tasks; each task is fully isolated, so the result does not
/// depend on the worker count.
pub fn train_ensemble(
    data: &Dataset,
    codebook: &SourceCodebook,
    arch: DenoiserArch,
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<(EnsembleModel, Vec<TrainReport>), EnsembleError> {
    let splits = splits_from_codebook(codebook, &data.sources)?;
    let split_images: Vec<Vec<Image>> = splits
        .splits
        .iter()
        .map(|split| split.iter().map(|&d| data.image(d as usize)).collect())
        .collect();

    let results: Vec<Result<(DenoiserParams, TrainReport), EnsembleError>> = split_images
        .par_iter()
        .enumerate()
        .map(|(i, images)| {
            let member_cfg = TrainConfig { seed: cfg.seed ^ i as u64, ..*cfg };
            train_denoiser(images, arch, &member_cfg, sched)
                .map_err(|source| EnsembleError::MemberTraining { index: i, source })
        })
        .collect();

    let mut members = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (params, report) = r?;
        members.push(params);
        reports.push(report);
    }

    let manifest = EnsembleManifest {
        arch,
        train_config: *cfg,
        member_seeds: (0..members.len()).map(|i| cfg.seed ^ i as u64).collect(),
        split_sizes: splits.splits.iter().map(|s| s.len()).collect(),
        trainings: members.len() as u64,
        value_range: data.value_range,
        member_files: Vec::new(),
        codebook_file: String::new(),
    };
    Ok((
        EnsembleModel::from_parts(members, sched.clone(), codebook.clone(), manifest),
        reports,
    ))
}

/// Convenience for tests and reports: the ensemble directory path layout.
pub fn member_checkpoint_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("member_{index:02}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::assign_codewords;
    use crate::dataset::generate_synthetic;
    use crate::tensor::ImageShape;

    /// An ensemble whose member i always predicts the constant `values[i]`.
    fn constant_ensemble(values: &[f64]) -> EnsembleModel {
        use crate::codebook::Codeword;
        let n = values.len();
        let arch = DenoiserArch::new(1, 2, 8).unwrap();
        let sched = Schedule::new(10, 2, 1e-4, 0.02).unwrap();
        // identity codebook: source i maps to the word with bit i set
        let entries: Vec<Codeword> =
            (0..n).map(|i| Codeword::new(n as u32, 1u64 << (n - 1 - i))).collect();
        let cb = SourceCodebook::from_entries(n as u32, 1, 0, entries);
        let members: Vec<DenoiserParams> = values
            .iter()
            .map(|&v| {
                let mut p = DenoiserParams::init(arch, 0);
                p.values.fill(0.0);
                // zero weights leave only the final bias: constant output
                let count = p.values.len();
                let c = arch.channels;
                for i in 0..c {
                    p.values[count - c + i] = v as f32;
                }
                p
            })
            .collect();
        let manifest = EnsembleManifest {
            arch,
            train_config: TrainConfig {
                epochs: 0,
                batch_size: 1,
                learning_rate: 1e-3,
                seed: 0,
                optimizer: Default::default(),
                dropout: 0.0,
            },
            member_seeds: vec![0; n],
            split_sizes: vec![0; n],
            trainings: n as u64,
            value_range: (0.0, 1.0),
            member_files: Vec::new(),
            codebook_file: String::new(),
        };
        EnsembleModel::from_parts(members, sched, cb, manifest)
    }

    fn probe(e: &EnsembleModel) -> Image {
        Image::zeros(e.image_shape())
    }

    #[test]
    fn mean_of_constant_members() {
        let e = constant_ensemble(&[2.0, 4.0]);
        let x = probe(&e);
        let full = e.predict_mean(&AblationMask::full(2), &x, 1).unwrap();
        assert!(full.data.iter().all(|&v| v == 3.0));
        let second_only = e.predict_mean(&AblationMask(vec![false, true]), &x, 1).unwrap();
        assert!(second_only.data.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn weighted_matches_cited_formula() {
        let e = constant_ensemble(&[2.0, 4.0]);
        let x = probe(&e);
        let ones = e.predict_weighted(&CoefficientVector::ones(2), &x, 1).unwrap();
        assert!(ones.data.iter().all(|&v| v == 3.0));
        let ablate_first =
            e.predict_weighted(&CoefficientVector(vec![0.0, 2.0]), &x, 1).unwrap();
        assert!(ablate_first.data.iter().all(|&v| v == 4.0));
        let zeros = e.predict_weighted(&CoefficientVector(vec![0.0, 0.0]), &x, 1).unwrap();
        assert!(zeros.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_coefficients_examples() {
        let m = AblationMask(vec![true, true, false, false]);
        assert_eq!(mask_to_coefficients(&m).unwrap().0, vec![2.0, 2.0, 0.0, 0.0]);
        assert_eq!(
            mask_to_coefficients(&AblationMask::full(3)).unwrap().0,
            vec![1.0, 1.0, 1.0]
        );
        assert_eq!(
            mask_to_coefficients(&AblationMask(vec![false, false, true])).unwrap().0,
            vec![0.0, 0.0, 3.0]
        );
        assert!(matches!(
            mask_to_coefficients(&AblationMask(vec![false, false])),
            Err(EnsembleError::EmptyMask)
        ));
    }

    #[test]
    fn weighted_equals_mean_bit_exactly_on_trained_members() {
        use rand::Rng;
        let data = generate_synthetic(8, 8, 4, 3).unwrap();
        let cb = assign_codewords(4, 4, 2, 1).unwrap();
        let arch = DenoiserArch::new(1, 3, 8).unwrap();
        let sched = Schedule::new(20, 4, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 9,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let (e, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        let x = {
            let mut stream = crate::rng::stream(4);
            let mut img = Image::zeros(e.image_shape());
            crate::rng::fill_normal(&mut stream, &mut img.data);
            img
        };
        let mut stream = crate::rng::stream(8);
        for _ in 0..25 {
            let mask = AblationMask((0..4).map(|_| stream.random_range(0..2u32) == 1).collect());
            if mask.kept() == 0 {
                continue;
            }
            let mean = e.predict_mean(&mask, &x, 5).unwrap();
            let weighted = e
                .predict_weighted(&mask_to_coefficients(&mask).unwrap(), &x, 5)
                .unwrap();
            assert_eq!(mean.data, weighted.data);
        }
    }

    #[test]
    fn weighted_is_linear_in_coefficients() {
        let data = generate_synthetic(8, 8, 4, 5).unwrap();
        let cb = assign_codewords(4, 4, 2, 2).unwrap();
        let arch = DenoiserArch::new(1, 3, 8).unwrap();
        let sched = Schedule::new(20, 4, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 2,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let (e, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        let x = probe(&e);
        let c1 = CoefficientVector(vec![1.0, -0.5, 2.0, 0.25]);
        let c2 = CoefficientVector(vec![0.5, 1.5, -1.0, 3.0]);
        let combo = CoefficientVector(
            c1.0.iter().zip(&c2.0).map(|(&a, &b)| 2.0 * a + 0.5 * b).collect(),
        );
        let y1 = e.predict_weighted(&c1, &x, 3).unwrap();
        let y2 = e.predict_weighted(&c2, &x, 3).unwrap();
        let yc = e.predict_weighted(&combo, &x, 3).unwrap();
        for i in 0..yc.len() {
            let expect = 2.0 * y1.data[i] + 0.5 * y2.data[i];
            assert!((yc.data[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn reversal_permutation_is_bit_identical() {
        let values = [1.5, -0.25, 0.75, 2.0];
        let e = constant_ensemble(&values);
        let reversed: Vec<f64> = values.iter().rev().copied().collect();
        let er = constant_ensemble(&reversed);
        let x = probe(&e);
        let mask = AblationMask(vec![true, false, true, true]);
        let mask_rev = AblationMask(mask.0.iter().rev().copied().collect());
        let a = e.predict_mean(&mask, &x, 1).unwrap();
        let b = er.predict_mean(&mask_rev, &x, 1).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn ablation_mask_drops_exactly_the_source_members() {
        let data = generate_synthetic(8, 8, 4, 7).unwrap();
        let cb = assign_codewords(4, 4, 2, 3).unwrap();
        let arch = DenoiserArch::new(1, 2, 8).unwrap();
        let sched = Schedule::new(10, 2, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 1,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let (e, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        for s in 0..4u32 {
            let mask = e.ablation_mask_for_source(s).unwrap();
            let members = cb.members_for_source(s).unwrap();
            for i in 0..4u32 {
                assert_eq!(mask.0[i as usize], !members.contains(&i));
            }
            assert_eq!(mask.kept(), 2);
            // every other source keeps at least one trained member
            for s2 in 0..4u32 {
                if s2 == s {
                    continue;
                }
                let kept_for_s2 = cb
                    .members_for_source(s2)
                    .unwrap()
                    .iter()
                    .any(|&m| mask.0[m as usize]);
                assert!(kept_for_s2);
            }
        }
        assert!(matches!(
            e.ablation_mask_for_source(4),
            Err(EnsembleError::UnknownSource(4))
        ));
    }

    #[test]
    fn training_is_reproducible_and_members_differ() {
        let data = generate_synthetic(8, 8, 2, 11).unwrap();
        let cb = assign_codewords(2, 2, 1, 4).unwrap();
        let arch = DenoiserArch::new(1, 2, 8).unwrap();
        let sched = Schedule::new(10, 2, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 13,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let (a, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        let (b, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        for i in 0..2 {
            assert_eq!(a.member(i).params(), b.member(i).params());
        }
        assert_ne!(a.member(0).params(), a.member(1).params());
        assert_eq!(a.manifest.trainings, 2);
        assert_eq!(a.manifest.member_seeds, vec![13, 12]);
    }

    #[test]
    fn directory_roundtrip_preserves_members() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(8, 8, 4, 19).unwrap();
        let cb = assign_codewords(4, 4, 2, 6).unwrap();
        let arch = DenoiserArch::new(1, 2, 8).unwrap();
        let sched = Schedule::new(10, 2, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
            optimizer: Default::default(),
            dropout: 0.0,
        };
        let (e, _) = train_ensemble(&data, &cb, arch, &cfg, &sched).unwrap();
        e.save(dir.path()).unwrap();
        let loaded = EnsembleModel::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded.codebook(), e.codebook());
        assert_eq!(loaded.schedule(), e.schedule());
        for i in 0..4 {
            assert_eq!(loaded.member(i).params(), e.member(i).params());
        }
        let x = probe(&e);
        let ya = e.predict_mean(&AblationMask::full(4), &x, 2).unwrap();
        let yb = loaded.predict_mean(&AblationMask::full(4), &x, 2).unwrap();
        assert_eq!(ya.data, yb.data);
    }

    #[test]
    fn shape_probe() {
        let e = constant_ensemble(&[1.0]);
        assert_eq!(e.image_shape(), ImageShape::new(1, 8, 8));
    }
}
