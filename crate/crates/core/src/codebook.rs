//! Constant-weight code assignment of data sources to ensemble splits.
//!
//! Each data source gets a distinct binary codeword of length `n` (the
//! ensemble size) and fixed Hamming weight `w`; member `i` trains on a
//! datum exactly when bit `i` of its source's codeword is 1. Equal weight
//! plus distinctness guarantees that ablating every member that saw one
//! source never removes all members that saw any other source, so
//! per-source ablation is surgical. The module also carries the abstract
//! cost model for comparing retraining, ablation, and differential
//! ablation pipelines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("invalid weight: w={w} must satisfy 1 <= w < n={n}")]
    InvalidWeight { n: u32, w: u32 },
    #[error("invalid member count: n={n} must satisfy 2 <= n <= 64")]
    InvalidMemberCount { n: u32 },
    #[error("capacity exceeded: {sources} sources > C({n},{w}) = {capacity}")]
    CapacityExceeded { sources: u64, n: u32, w: u32, capacity: u64 },
    #[error("unknown source id {0}")]
    UnknownSource(u32),
    #[error("codeword bitstring {0:?} is malformed")]
    BadBitstring(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("codebook file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One length-`n` binary codeword. Bit 0 is the leftmost (most
/// significant) position, so the numeric order of `bits` under a fixed
/// `n` equals the lexicographic order of the bitstrings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Codeword {
    n: u32,
    bits: u64,
}

impl Codeword {
    pub fn new(n: u32, bits: u64) -> Self {
        assert!(n >= 1 && n <= 64, "codeword length out of range");
        assert!(n == 64 || bits < (1u64 << n), "bits exceed length");
        Self { n, bits }
    }

    pub fn from_bitstring(s: &str) -> Result<Self, CodebookError> {
        let n = s.len();
        if n == 0 || n > 64 {
            return Err(CodebookError::BadBitstring(s.to_string()));
        }
        let mut bits = 0u64;
        for ch in s.chars() {
            bits = (bits << 1)
                | match ch {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(CodebookError::BadBitstring(s.to_string())),
                };
        }
        Ok(Self { n: n as u32, bits })
    }

    pub fn len(&self) -> u32 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weight(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Bit at position `i`, counting from the left.
    pub fn bit(&self, i: u32) -> bool {
        debug_assert!(i < self.n);
        (self.bits >> (self.n - 1 - i)) & 1 == 1
    }

    /// Positions of 1-bits: the member set S(s) for the assigned source.
    pub fn one_positions(&self) -> Vec<u32> {
        (0..self.n).filter(|&i| self.bit(i)).collect()
    }

    pub fn raw_bits(&self) -> u64 {
        self.bits
    }
}

impl fmt::Display for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            write!(f, "{}", if self.bit(i) { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// Exact binomial coefficient, saturating at u64::MAX (C(64,32) still fits).
pub fn binomial(n: u32, k: u32) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k as u128 {
        acc = acc * (n as u128 - i) / (i + 1);
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// All C(n, w) weight-`w` codewords of length `n` in lexicographic order
/// (bit 0 most significant).
pub fn enumerate_constant_weight(n: u32, w: u32) -> Result<Vec<Codeword>, CodebookError> {
    if w < 1 || w >= n {
        return Err(CodebookError::InvalidWeight { n, w });
    }
    if n > 64 {
        return Err(CodebookError::InvalidMemberCount { n });
    }
    let count = binomial(n, w);
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    // Gosper's hack walks weight-w integers in ascending numeric order,
    // which is lexicographic order under the leftmost-bit-0 convention.
    let mut v: u64 = (1u64 << w) - 1;
    let limit = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    loop {
        out.push(Codeword { n, bits: v });
        if out.len() as u64 == count {
            break;
        }
        let c = v & v.wrapping_neg();
        let r = v + c;
        v = (((r ^ v) >> 2) / c) | r;
        if v > limit {
            break;
        }
    }
    Ok(out)
}

/// The `r`-th (0-based) weight-`w` codeword of length `n` in lexicographic
/// order, via the combinatorial number system.
fn unrank_constant_weight(n: u32, w: u32, mut r: u64) -> Codeword {
    let mut bits = 0u64;
    let mut remaining = w;
    for i in 0..n {
        if remaining == 0 {
            break;
        }
        let zeros_here = binomial(n - 1 - i, remaining);
        if r < zeros_here {
            // bit i stays 0
        } else {
            r -= zeros_here;
            bits |= 1u64 << (n - 1 - i);
            remaining -= 1;
        }
    }
    Codeword { n, bits }
}

/// Rule for choosing the codeword weight as a function of ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightRule {
    /// w = floor(n/2), clamped to at least 1: each member sees about half
    /// the training set.
    Half,
    /// w = floor(r * n), clamped to [1, n-1]; r = 0.1 gives the tenth-weight
    /// variant where each member sees about a tenth of the data.
    Fraction(f64),
}

impl WeightRule {
    pub fn weight_for(&self, n: u32) -> u32 {
        let raw = match self {
            WeightRule::Half => n / 2,
            WeightRule::Fraction(r) => (r * n as f64).floor() as u32,
        };
        raw.clamp(1, n.saturating_sub(1).max(1))
    }
}

/// Smallest ensemble size n such that C(n, w(n)) covers `sources` distinct
/// codewords under the given weight rule. Grows as O(log N).
pub fn min_ensemble_size(sources: u64, rule: WeightRule) -> u32 {
    let mut n = 2u32;
    loop {
        let w = rule.weight_for(n);
        if w >= 1 && w < n && binomial(n, w) >= sources {
            return n;
        }
        n += 1;
        assert!(n <= 64, "source count exceeds 64-member capacity");
    }
}

/// Assignment of dense source ids 0..N-1 to distinct constant-weight
/// codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceCodebook {
    n: u32,
    w: u32,
    seed: u64,
    entries: Vec<Codeword>,
}

impl SourceCodebook {
    /// Builds a codebook without checking the equal-weight / distinctness
    /// premises; `verify_theorem1` is the checker for those.
    pub fn from_entries(n: u32, w: u32, seed: u64, entries: Vec<Codeword>) -> Self {
        assert!(entries.iter().all(|c| c.len() == n), "codeword length mismatch");
        Self { n, w, seed, entries }
    }

    pub fn members(&self) -> u32 {
        self.n
    }

    pub fn weight(&self) -> u32 {
        self.w
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_sources(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn codeword(&self, source: u32) -> Result<Codeword, CodebookError> {
        self.entries
            .get(source as usize)
            .copied()
            .ok_or(CodebookError::UnknownSource(source))
    }

    pub fn codewords(&self) -> &[Codeword] {
        &self.entries
    }

    /// S(s): the members whose split contains data from `source`.
    pub fn members_for_source(&self, source: u32) -> Result<Vec<u32>, CodebookError> {
        Ok(self.codeword(source)?.one_positions())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: BTreeMap<u32, String> = self
            .entries
            .iter()
            .enumerate()
            .map(|(s, c)| (s as u32, c.to_string()))
            .collect();
        serde_json::json!({
            "n": self.n,
            "w": self.w,
            "seed": self.seed,
            "entries": entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        #[derive(Deserialize)]
        struct Raw {
            n: u32,
            w: u32,
            #[serde(default)]
            seed: u64,
            entries: BTreeMap<u32, String>,
        }
        let raw: Raw = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut entries = Vec::with_capacity(raw.entries.len());
        for (expect, (id, bits)) in raw.entries.iter().enumerate() {
            if *id as usize != expect {
                return Err(CodebookError::UnknownSource(*id));
            }
            let cw = Codeword::from_bitstring(bits)?;
            if cw.len() != raw.n {
                return Err(CodebookError::BadBitstring(bits.clone()));
            }
            entries.push(cw);
        }
        Ok(Self::from_entries(raw.n, raw.w, raw.seed, entries))
    }
}

/// Assigns the first `sources` codewords of a seed-deterministic shuffle of
/// the lexicographic weight-`w` enumeration.
///
/// The shuffle prefix is computed with a sparse Fisher-Yates over codeword
/// ranks, so the full enumeration is never materialized; ranks map to
/// codewords through combinatorial unranking.
pub fn assign_codewords(
    sources: u32,
    n: u32,
    w: u32,
    seed: u64,
) -> Result<SourceCodebook, CodebookError> {
    if n < 2 || n > 64 {
        return Err(CodebookError::InvalidMemberCount { n });
    }
    if w < 1 || w >= n {
        return Err(CodebookError::InvalidWeight { n, w });
    }
    let capacity = binomial(n, w);
    if sources as u64 > capacity {
        return Err(CodebookError::CapacityExceeded { sources: sources as u64, n, w, capacity });
    }
    let mut rng = rng::stream(seed);
    let mut swaps: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    let mut entries = Vec::with_capacity(sources as usize);
    for i in 0..sources as u64 {
        let j = rng.random_range(i..capacity);
        let pick = swaps.get(&j).copied().unwrap_or(j);
        let here = swaps.get(&i).copied().unwrap_or(i);
        swaps.insert(j, here);
        entries.push(unrank_constant_weight(n, w, pick));
    }
    Ok(SourceCodebook { n, w, seed, entries })
}

/// Per-member training splits derived from a codebook and a datum-to-source
/// mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    /// splits[i] = sorted indices of data assigned to member i.
    pub splits: Vec<Vec<u32>>,
    pub datum_sources: Vec<u32>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        let map: BTreeMap<u32, &Vec<u32>> =
            self.splits.iter().enumerate().map(|(i, s)| (i as u32, s)).collect();
        std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
        Ok(())
    }
}

/// Datum `d` lands in split `i` iff bit `i` of its source's codeword is 1.
pub fn splits_from_codebook(
    cb: &SourceCodebook,
    datum_sources: &[u32],
) -> Result<SplitManifest, CodebookError> {
    let mut splits = vec![Vec::new(); cb.members() as usize];
    for (d, &s) in datum_sources.iter().enumerate() {
        let cw = cb.codeword(s)?;
        for i in 0..cb.members() {
            if cw.bit(i) {
                splits[i as usize].push(d as u32);
            }
        }
    }
    // Insertion order is ascending in d already; keep the contract explicit.
    for split in &mut splits {
        split.sort_unstable();
    }
    Ok(SplitManifest { splits, datum_sources: datum_sources.to_vec() })
}

/// Outcome of checking the surgical-ablation property over all ordered
/// source pairs, together with the premises it rests on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TheoremVerdict {
    Ok,
    Violations(Vec<TheoremViolation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TheoremViolation {
    /// S(s) \ S(s') is empty for distinct s, s'.
    EmptyDifference { s: u32, s_prime: u32 },
    DuplicateCodeword { s: u32, s_prime: u32 },
    WrongWeight { s: u32, weight: u32, expected: u32 },
}

/// Checks every ordered pair (s, s') of distinct sources for
/// S(s) \ S(s') != empty, and re-checks the premises: distinct codewords,
/// all weights equal to the declared weight.
pub fn verify_theorem1(cb: &SourceCodebook) -> TheoremVerdict {
    let mut violations = Vec::new();
    let words = cb.codewords();
    for (s, cw) in words.iter().enumerate() {
        if cw.weight() != cb.weight() {
            violations.push(TheoremViolation::WrongWeight {
                s: s as u32,
                weight: cw.weight(),
                expected: cb.weight(),
            });
        }
    }
    for s in 0..words.len() {
        for s_prime in 0..words.len() {
            if s == s_prime {
                continue;
            }
            if words[s] == words[s_prime] && s < s_prime {
                violations.push(TheoremViolation::DuplicateCodeword {
                    s: s as u32,
                    s_prime: s_prime as u32,
                });
            }
            // set difference on bit masks: kept = S(s) & !S(s')
            if words[s].raw_bits() & !words[s_prime].raw_bits() == 0 {
                violations.push(TheoremViolation::EmptyDifference {
                    s: s as u32,
                    s_prime: s_prime as u32,
                });
            }
        }
    }
    if violations.is_empty() {
        TheoremVerdict::Ok
    } else {
        TheoremVerdict::Violations(violations)
    }
}

/// Abstract operation counts for one attribution pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Full model-training runs.
    pub trainings: u64,
    /// Single-denoiser forward evaluations (a dual-number evaluation counts
    /// as one).
    pub denoiser_calls: u64,
    /// Jacobian matrix-vector products.
    pub matvecs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostComparison {
    pub rbc: CostEstimate,
    pub abc: CostEstimate,
    pub diffabl: CostEstimate,
}

/// Unit-operation counts for generating `n_samples` samples and their full
/// counterfactual landscapes over `sources` sources, with an `n`-member
/// weight-`w` ensemble and `steps` sampling steps.
pub fn estimate_costs(
    sources: u64,
    n: u64,
    w: u64,
    steps: u64,
    n_samples: u64,
) -> Result<CostComparison, CodebookError> {
    if w >= n {
        return Err(CodebookError::InvalidWeight { n: n as u32, w: w as u32 });
    }
    let rbc = CostEstimate {
        trainings: sources + 1,
        denoiser_calls: n_samples * (sources + 1) * steps,
        matvecs: 0,
    };
    let abc = CostEstimate {
        trainings: n,
        denoiser_calls: n_samples * steps * (n + sources * (n - w)),
        matvecs: 0,
    };
    let diffabl = CostEstimate {
        trainings: n,
        denoiser_calls: n_samples * steps * n * (n + 1),
        matvecs: n_samples * sources,
    };
    Ok(CostComparison { rbc, abc, diffabl })
}
