//! Differential ablation: the Jacobian of the generated sample with
//! respect to the ensemble coefficients at the all-ones point, computed by
//! propagating one tangent per member through every sampling step. Any
//! ablation is then approximated by a single matrix-vector product against
//! the coefficient displacement.

use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::codebook::SourceCodebook;
use crate::diffusion::{ExogenousNoise, SampleMode};
use crate::ensemble::{mask_to_coefficients, CoefficientVector, EnsembleModel};
use crate::io as bin;
use crate::landscape::{
    generate_factual_traced, CounterfactualLandscape, LandscapeEntry, LandscapeError,
    LandscapeOptions,
};
use crate::stats::{pearson, spearman, StatsError};
use crate::tensor::{tree_sum_into, Image, ImageShape};

const JAC_MAGIC: &[u8; 4] = b"ABCJ";
const JAC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DiffablError {
    #[error("coefficient vector length {got} does not match column count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite tangent at sampling step {step} (column {column})")]
    NonFiniteTangent { step: usize, column: usize },
    #[error("codebook has {cb} members but jacobian has {jac} columns")]
    CodebookMismatch { cb: u32, jac: usize },
    #[error("landscapes cover different source sets")]
    SourceSetMismatch,
    #[error("landscape error: {0}")]
    Landscape(#[from] LandscapeError),
    #[error("bad jacobian file: {0}")]
    BadFile(String),
    #[error("jacobian crc mismatch")]
    CrcMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Jacobian of the flattened sample with respect to the coefficient vector
/// at c = u (all ones), plus the base sample generated there.
pub struct SampleJacobian {
    /// columns[j][p] = d sample_p / d c_j at c = u.
    columns: Vec<Vec<f64>>,
    pub base: Image,
    pub eps_seed: u64,
    pub mode: SampleMode,
    matvecs: AtomicU64,
}

impl SampleJacobian {
    pub fn sample_dim(&self) -> usize {
        self.base.len()
    }

    pub fn member_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn matvec_count(&self) -> u64 {
        self.matvecs.load(Ordering::Relaxed)
    }

    pub fn reset_matvec_count(&self) {
        self.matvecs.store(0, Ordering::Relaxed);
    }

    pub fn is_finite(&self) -> bool {
        self.columns.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Computes the Jacobian with n tangent passes over the recorded factual
/// trajectory. The primal trajectory is produced by the ordinary factual
/// sampler, so it matches `generate_factual` bit for bit; injected noise
/// (ancestral mode) is a constant with zero tangent, so the same
/// propagation rule covers both modes.
pub fn jacobian(
    e: &EnsembleModel,
    eps: &ExogenousNoise,
) -> Result<SampleJacobian, DiffablError> {
    let n = e.len();
    let (base, trace) = generate_factual_traced(e, eps)?;
    let sched = e.schedule();
    let ladder = sched.ladder();

    let columns: Result<Vec<Vec<f64>>, DiffablError> = (0..n)
        .into_par_iter()
        .map(|j| {
            let shape = base.shape;
            let mut xdot = Image::zeros(shape);
            for (step, &t) in ladder.iter().enumerate() {
                let x = &trace[step];
                // dual evaluation of every member at the recorded state
                let mut values = Vec::with_capacity(n);
                let mut tangents: Vec<Vec<f64>> = Vec::with_capacity(n);
                for i in 0..n {
                    let (value, tangent) = e.member(i).forward_dual(x, &xdot, t);
                    let mut scaled = tangent.data;
                    for v in &mut scaled {
                        *v /= n as f64;
                    }
                    tangents.push(scaled);
                    values.push(value);
                }
                // d(f.c)/dc_j at c = u: mean of member input-tangents plus
                // the member-j output itself, both over n
                let mut ehat_dot = vec![0.0; shape.len()];
                tree_sum_into(&tangents, &mut ehat_dot);
                for (slot, &vj) in ehat_dot.iter_mut().zip(&values[j].data) {
                    *slot += vj / n as f64;
                }

                let prev = ladder.get(step + 1).copied().unwrap_or(0);
                let a_t = sched.alpha_bar(t);
                let a_p = sched.alpha_bar(prev);
                let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
                let sa_p = a_p.sqrt();
                let ehat_coeff = match eps.mode {
                    SampleMode::Deterministic => (1.0 - a_p).sqrt(),
                    SampleMode::Ancestral => {
                        let sigma2 =
                            ((1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p)).max(0.0);
                        (1.0 - a_p - sigma2).max(0.0).sqrt()
                    }
                };
                // x' = sa_p * (x - sb_t e) / sa_t + coeff * e (+ const noise)
                let chain = sa_p / sa_t;
                for i in 0..xdot.data.len() {
                    xdot.data[i] =
                        chain * (xdot.data[i] - sb_t * ehat_dot[i]) + ehat_coeff * ehat_dot[i];
                }
                if !xdot.is_finite() {
                    return Err(DiffablError::NonFiniteTangent { step, column: j });
                }
            }
            Ok(xdot.data)
        })
        .collect();

    Ok(SampleJacobian {
        columns: columns?,
        base,
        eps_seed: eps.seed,
        mode: eps.mode,
        matvecs: AtomicU64::new(0),
    })
}

impl SampleJacobian {
    /// First-order approximation y + J (c - u), truncating the quadratic
    /// remainder.
    pub fn approx_counterfactual(
        &self,
        c: &CoefficientVector,
    ) -> Result<Image, DiffablError> {
        if c.len() != self.columns.len() {
            return Err(DiffablError::LengthMismatch {
                got: c.len(),
                expected: self.columns.len(),
            });
        }
        self.matvecs.fetch_add(1, Ordering::Relaxed);
        let mut out = self.base.clone();
        for (j, column) in self.columns.iter().enumerate() {
            let dc = c.0[j] - 1.0;
            if dc == 0.0 {
                continue;
            }
            for (slot, &g) in out.data.iter_mut().zip(column) {
                *slot += g * dc;
            }
        }
        Ok(out)
    }

    /// Approximate landscape: one matrix-vector product per source, same
    /// record shape as the exact enumeration, flagged approximate.
    pub fn approx_landscape(
        &self,
        cb: &SourceCodebook,
        opts: &LandscapeOptions,
    ) -> Result<CounterfactualLandscape, DiffablError> {
        if cb.members() as usize != self.columns.len() {
            return Err(DiffablError::CodebookMismatch {
                cb: cb.members(),
                jac: self.columns.len(),
            });
        }
        let n = cb.members();
        let base = match opts.binarize_threshold {
            Some(th) => self.base.binarize(th),
            None => self.base.clone(),
        };
        let mut entries = Vec::with_capacity(cb.num_sources() as usize);
        for source in 0..cb.num_sources() {
            let cw = cb
                .codeword(source)
                .map_err(|_| LandscapeError::UnknownSource(source))?;
            let mask =
                crate::ensemble::AblationMask((0..n).map(|i| !cw.bit(i)).collect());
            let coeffs = mask_to_coefficients(&mask).map_err(LandscapeError::Ensemble)?;
            let cf = self.approx_counterfactual(&coeffs)?;
            let cf = match opts.binarize_threshold {
                Some(th) => cf.binarize(th),
                None => cf,
            };
            let distance = opts.metric.distance(&base, &cf).map_err(LandscapeError::Metric)?;
            entries.push(LandscapeEntry {
                source,
                distance,
                counterfactual: opts.keep_images.then_some(cf),
            });
        }
        Ok(CounterfactualLandscape {
            factual: base,
            eps_seed: self.eps_seed,
            mode: self.mode,
            metric: opts.metric,
            entries,
            approximate: true,
            binarize_threshold: opts.binarize_threshold,
        })
    }

    /// File layout: "ABCJ", version, m, n, shape, eps seed, mode flag,
    /// row-major f32 J, f32 base sample, trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.sample_dim();
        let n = self.member_count();
        let mut w = Vec::new();
        w.write_all(JAC_MAGIC).unwrap();
        bin::write_u32(&mut w, JAC_VERSION).unwrap();
        bin::write_u32(&mut w, m as u32).unwrap();
        bin::write_u32(&mut w, n as u32).unwrap();
        bin::write_u32(&mut w, self.base.shape.channels as u32).unwrap();
        bin::write_u32(&mut w, self.base.shape.height as u32).unwrap();
        bin::write_u32(&mut w, self.base.shape.width as u32).unwrap();
        bin::write_u64(&mut w, self.eps_seed).unwrap();
        w.push(match self.mode {
            SampleMode::Deterministic => 0,
            SampleMode::Ancestral => 1,
        });
        for p in 0..m {
            for column in &self.columns {
                w.write_all(&(column[p] as f32).to_le_bytes()).unwrap();
            }
        }
        bin::write_f32_slice(&mut w, &self.base.to_f32()).unwrap();
        let crc = bin::crc32(&w);
        bin::write_u32(&mut w, crc).unwrap();
        w
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffablError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffablError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 8 {
            return Err(DiffablError::BadFile("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if bin::crc32(body) != stored {
            return Err(DiffablError::CrcMismatch);
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| DiffablError::BadFile("magic".into()))?;
        if &magic != JAC_MAGIC {
            return Err(DiffablError::BadFile("wrong magic".into()));
        }
        let version = bin::read_u32(&mut r)?;
        if version != JAC_VERSION {
            return Err(DiffablError::BadFile(format!("unsupported version {version}")));
        }
        let m = bin::read_u32(&mut r)? as usize;
        let n = bin::read_u32(&mut r)? as usize;
        let channels = bin::read_u32(&mut r)? as usize;
        let height = bin::read_u32(&mut r)? as usize;
        let width = bin::read_u32(&mut r)? as usize;
        let shape = ImageShape::new(channels, height, width);
        if shape.len() != m {
            return Err(DiffablError::BadFile("shape does not match m".into()));
        }
        let eps_seed = bin::read_u64(&mut r)?;
        let mut mode_byte = [0u8; 1];
        r.read_exact(&mut mode_byte).map_err(|_| DiffablError::BadFile("mode".into()))?;
        let mode = match mode_byte[0] {
            0 => SampleMode::Deterministic,
            1 => SampleMode::Ancestral,
            b => return Err(DiffablError::BadFile(format!("mode byte {b}"))),
        };
        let flat = bin::read_f32_vec(&mut r, m * n)
            .map_err(|_| DiffablError::BadFile("jacobian payload".into()))?;
        let mut columns = vec![vec![0.0f64; m]; n];
        for p in 0..m {
            for (j, column) in columns.iter_mut().enumerate() {
                column[p] = flat[p * n + j] as f64;
            }
        }
        let base = bin::read_f32_vec(&mut r, m)
            .map_err(|_| DiffablError::BadFile("base payload".into()))?;
        Ok(Self {
            columns,
            base: Image::from_f32(shape, &base),
            eps_seed,
            mode,
            matvecs: AtomicU64::new(0),
        })
    }
}

/// Agreement between an exact landscape and its differential-ablation
/// approximation: rank correlation of the distance vectors and, per
/// source, the correlation of exact vs approximated difference images.
/// Degenerate (zero-variance) inputs are flagged `None`, never an error.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub spearman: Option<f64>,
    pub per_pixel_pearson: Vec<(u32, Option<f64>)>,
}

fn flatten_undefined(r: Result<f64, StatsError>) -> Result<Option<f64>, StatsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(StatsError::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn fidelity_report(
    exact: &CounterfactualLandscape,
    approx: &CounterfactualLandscape,
) -> Result<FidelityReport, DiffablError> {
    let exact_sources: Vec<u32> = exact.entries.iter().map(|e| e.source).collect();
    let approx_sources: Vec<u32> = approx.entries.iter().map(|e| e.source).collect();
    if exact_sources != approx_sources {
        return Err(DiffablError::SourceSetMismatch);
    }
    let xs: Vec<f64> = exact.entries.iter().map(|e| e.distance).collect();
    let ys: Vec<f64> = approx.entries.iter().map(|e| e.distance).collect();
    let rank_corr = flatten_undefined(spearman(&xs, &ys))
        .map_err(|e| DiffablError::BadFile(e.to_string()))?;

    let mut per_pixel = Vec::with_capacity(exact.entries.len());
    for (ee, ae) in exact.entries.iter().zip(&approx.entries) {
        let corr = match (&ee.counterfactual, &ae.counterfactual) {
            (Some(ecf), Some(acf)) => {
                let ediff: Vec<f64> = ecf
                    .data
                    .iter()
                    .zip(&exact.factual.data)
                    .map(|(&c, &f)| c - f)
                    .collect();
                let adiff: Vec<f64> = acf
                    .data
                    .iter()
                    .zip(&approx.factual.data)
                    .map(|(&c, &f)| c - f)
                    .collect();
                flatten_undefined(pearson(&ediff, &adiff))
                    .map_err(|e| DiffablError::BadFile(e.to_string()))?
            }
            _ => return Err(DiffablError::Landscape(LandscapeError::ImagesNotKept)),
        };
        per_pixel.push((ee.source, corr));
    }
    Ok(FidelityReport { spearman: rank_corr, per_pixel_pearson: per_pixel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{Metric, MetricKind};

    fn toy_jacobian(cols: Vec<Vec<f64>>, base: Vec<f64>) -> SampleJacobian {
        let m = base.len();
        let side = (m as f64).sqrt() as usize;
        SampleJacobian {
            columns: cols,
            base: Image::from_vec(ImageShape::new(1, side, side), base),
            eps_seed: 7,
            mode: SampleMode::Deterministic,
            matvecs: AtomicU64::new(0),
        }
    }

    #[test]
    fn identity_coefficients_return_base() {
        let j = toy_jacobian(vec![vec![1.0; 4], vec![2.0; 4]], vec![0.5; 4]);
        let out = j.approx_counterfactual(&CoefficientVector::ones(2)).unwrap();
        assert_eq!(out.data, vec![0.5; 4]);
        assert_eq!(j.matvec_count(), 1);
    }

    #[test]
    fn displacement_arithmetic() {
        // ablate member 0 of n = 2: c = (0, 2), c - u = (-1, +1)
        let j = toy_jacobian(vec![vec![1.0; 4], vec![10.0; 4]], vec![0.0; 4]);
        let mask = crate::ensemble::AblationMask(vec![false, true]);
        let c = mask_to_coefficients(&mask).unwrap();
        let out = j.approx_counterfactual(&c).unwrap();
        assert_eq!(out.data, vec![9.0; 4]);
        assert!(matches!(
            j.approx_counterfactual(&CoefficientVector::ones(3)),
            Err(DiffablError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn approx_landscape_counts_sources_and_matvecs() {
        let cb = crate::codebook::assign_codewords(3, 3, 1, 0).unwrap();
        let j =
            toy_jacobian(vec![vec![0.5; 4], vec![-0.5; 4], vec![0.25; 4]], vec![0.0; 4]);
        let opts = LandscapeOptions {
            metric: Metric::raw(MetricKind::Euclidean),
            keep_images: false,
            binarize_threshold: None,
        };
        let l = j.approx_landscape(&cb, &opts).unwrap();
        assert_eq!(l.entries.len(), 3);
        assert!(l.approximate);
        assert_eq!(j.matvec_count(), 3);
    }

    #[test]
    fn fidelity_on_identical_landscapes_is_perfect() {
        let cb = crate::codebook::assign_codewords(3, 3, 1, 0).unwrap();
        let j = toy_jacobian(
            vec![
                vec![2.0, 1.0, 0.5, 0.25],
                vec![0.5, -0.5, 1.0, 0.0],
                vec![-1.0, 2.0, 0.125, 0.75],
            ],
            vec![0.125; 4],
        );
        let opts = LandscapeOptions {
            metric: Metric::raw(MetricKind::Euclidean),
            keep_images: true,
            binarize_threshold: None,
        };
        let a = j.approx_landscape(&cb, &opts).unwrap();
        let report = fidelity_report(&a, &a).unwrap();
        assert_eq!(report.spearman, Some(1.0));
        for (_, corr) in &report.per_pixel_pearson {
            assert_eq!(*corr, Some(1.0));
        }
    }

    #[test]
    fn fidelity_flags_reversal_and_degeneracy() {
        let mk = |ds: &[f64], imgs: bool| CounterfactualLandscape {
            factual: Image::zeros(ImageShape::new(1, 2, 2)),
            eps_seed: 0,
            mode: SampleMode::Deterministic,
            metric: Metric::raw(MetricKind::Euclidean),
            entries: ds
                .iter()
                .enumerate()
                .map(|(s, &d)| LandscapeEntry {
                    source: s as u32,
                    distance: d,
                    counterfactual: imgs.then(|| {
                        Image::from_vec(
                            ImageShape::new(1, 2, 2),
                            vec![d, -d, 2.0 * d, 0.5 * d],
                        )
                    }),
                })
                .collect(),
            approximate: false,
            binarize_threshold: None,
        };
        let exact = mk(&[0.1, 0.2, 0.3], true);
        let reversed = mk(&[0.3, 0.2, 0.1], true);
        let report = fidelity_report(&exact, &reversed).unwrap();
        assert_eq!(report.spearman, Some(-1.0));

        // zero-variance difference image flags undefined, not a crash
        let degen_exact = mk(&[0.0, 0.0], true);
        let degen = fidelity_report(&degen_exact, &degen_exact).unwrap();
        assert_eq!(degen.spearman, None);
        assert!(degen.per_pixel_pearson.iter().all(|(_, c)| c.is_none()));
    }

    #[test]
    fn file_roundtrip_preserves_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jac.abcj");
        let j = toy_jacobian(
            vec![vec![0.25, -1.5, 3.0, 0.125], vec![2.0, 0.0, -0.5, 1.0]],
            vec![0.125, 0.25, 0.5, 0.75],
        );
        j.save(&path).unwrap();
        let loaded = SampleJacobian::load(&path).unwrap();
        assert_eq!(loaded.member_count(), 2);
        assert_eq!(loaded.sample_dim(), 4);
        assert_eq!(loaded.eps_seed, 7);
        // payload is f32-rounded; these values are exact in f32
        assert_eq!(loaded.column(0), j.column(0));
        assert_eq!(loaded.column(1), j.column(1));
        assert_eq!(loaded.base.data, j.base.data);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(SampleJacobian::load(&path), Err(DiffablError::CrcMismatch)));
    }
}
