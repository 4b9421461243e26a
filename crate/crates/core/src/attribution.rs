//! Visual and counterfactual attribution of generated samples to data
//! sources, plus top-k intersection statistics against the analytic
//! random baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::landscape::CounterfactualLandscape;
use crate::metric::Metric;
use crate::stats::{average_ranks, intersection_baseline};
use crate::tensor::Image;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty landscape")]
    EmptyLandscape,
    #[error("unknown source id {0}")]
    UnknownSource(u32),
    #[error("rankings cover different source universes")]
    MismatchedUniverse,
    #[error("k = {k} exceeds source count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("visual rank needs at least 2 sources")]
    DegenerateRankCount,
    #[error("metric error: {0}")]
    Metric(#[from] crate::metric::MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Visual,
    Counterfactual,
    Differential,
}

impl AttributionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttributionMethod::Visual => "visual",
            AttributionMethod::Counterfactual => "counterfactual",
            AttributionMethod::Differential => "differential",
        }
    }
}

/// Sources ordered most-attributed first, with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRanking {
    pub method: AttributionMethod,
    /// (source, score), most attributed first. Visual scores ascend
    /// (smaller distance = more attributed); counterfactual scores descend
    /// (larger displacement = more attributed). Ties break by source id.
    pub entries: Vec<(u32, f64)>,
    /// True when the ordering key ascends.
    pub ascending: bool,
}

impl AttributionRanking {
    pub fn top_k(&self, k: usize) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().take(k).map(|&(s, _)| s)
    }

    pub fn sources_sorted(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.entries.iter().map(|&(s, _)| s).collect();
        v.sort_unstable();
        v
    }
}

/// Per-source minimum distance between the sample and the source's
/// training images; most visually similar first.
pub fn visual_attribution(
    sample: &Image,
    data: &Dataset,
    metric: &Metric,
) -> Result<AttributionRanking, AttributionError> {
    if data.is_empty() {
        return Err(AttributionError::EmptyDataset);
    }
    let n = data.num_sources();
    let mut best = vec![f64::INFINITY; n as usize];
    for i in 0..data.len() {
        let d = metric.distance(sample, &data.image(i))?;
        let s = data.sources[i] as usize;
        if d < best[s] {
            best[s] = d;
        }
    }
    let mut entries: Vec<(u32, f64)> =
        best.into_iter().enumerate().map(|(s, d)| (s as u32, d)).collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(AttributionRanking { method: AttributionMethod::Visual, entries, ascending: true })
}

/// Sources inversely ranked by counterfactual displacement: the source
/// whose removal moved the sample farthest comes first.
pub fn counterfactual_attribution(
    l: &CounterfactualLandscape,
) -> Result<AttributionRanking, AttributionError> {
    if l.entries.is_empty() {
        return Err(AttributionError::EmptyLandscape);
    }
    let mut entries: Vec<(u32, f64)> =
        l.entries.iter().map(|e| (e.source, e.distance)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let method = if l.approximate {
        AttributionMethod::Differential
    } else {
        AttributionMethod::Counterfactual
    };
    Ok(AttributionRanking { method, entries, ascending: false })
}

/// Normalized visual rank of one source in [0, 1]: 0 = most visually
/// similar to the sample, ties averaged.
pub fn visual_similarity_rank(
    data: &Dataset,
    metric: &Metric,
    sample: &Image,
    source: u32,
) -> Result<f64, AttributionError> {
    let ranking = visual_attribution(sample, data, metric)?;
    let n = ranking.entries.len();
    if n < 2 {
        return Err(AttributionError::DegenerateRankCount);
    }
    if source as usize >= n {
        return Err(AttributionError::UnknownSource(source));
    }
    // scores by source id, then average-rank them
    let mut scores = vec![0.0; n];
    for &(s, score) in &ranking.entries {
        scores[s as usize] = score;
    }
    let ranks = average_ranks(&scores);
    Ok(ranks[source as usize] / (n - 1) as f64)
}

/// True iff the top-k sets of the two rankings share any source.
pub fn topk_intersection(
    a: &AttributionRanking,
    b: &AttributionRanking,
    k: usize,
) -> Result<bool, AttributionError> {
    if a.sources_sorted() != b.sources_sorted() {
        return Err(AttributionError::MismatchedUniverse);
    }
    if k > a.entries.len() {
        return Err(AttributionError::KTooLarge { k, n: a.entries.len() });
    }
    let top_a: std::collections::HashSet<u32> = a.top_k(k).collect();
    Ok(b.top_k(k).any(|s| top_a.contains(&s)))
}

/// Observed top-k intersection count over a set of ranking pairs, with
/// the analytic baseline and z-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionStat {
    pub k: usize,
    pub trials: u64,
    pub hits: u64,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    pub z: f64,
}

pub fn intersection_stat(
    pairs: &[(&AttributionRanking, &AttributionRanking)],
    k: usize,
) -> Result<IntersectionStat, AttributionError> {
    let trials = pairs.len() as u64;
    let mut hits = 0u64;
    let mut n_sources = None;
    for (a, b) in pairs {
        n_sources.get_or_insert(a.entries.len());
        if topk_intersection(a, b, k)? {
            hits += 1;
        }
    }
    let n = n_sources.unwrap_or(0) as u64;
    let (baseline_mean, baseline_sd) = intersection_baseline(n.max(1), k as u64, trials);
    let z = if baseline_sd > 0.0 { (hits as f64 - baseline_mean) / baseline_sd } else { 0.0 };
    Ok(IntersectionStat { k, trials, hits, baseline_mean, baseline_sd, z })
}

/// CSV rows `sample_id,method,rank,source_id,score` for one sample's
/// rankings.
pub fn rankings_to_csv_rows(sample_id: usize, rankings: &[&AttributionRanking]) -> String {
    let mut out = String::new();
    for r in rankings {
        for (rank, &(source, score)) in r.entries.iter().enumerate() {
            out.push_str(&format!(
                "{sample_id},{},{rank},{source},{score}\n",
                r.method.name()
            ));
        }
    }
    out
}

pub const RANKINGS_CSV_HEADER: &str = "sample_id,method,rank,source_id,score\n";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::metric::MetricKind;
    use crate::tensor::ImageShape;

    /// Two sources of 2-pixel "images": A owns (0,0), B owns (3,4).
    fn toy_data() -> Dataset {
        Dataset {
            shape: ImageShape::new(1, 1, 2),
            pixels: vec![0.0, 0.0, 3.0, 4.0],
            sources: vec![0, 1],
            value_range: (0.0, 4.0),
            provenance: Provenance::Synthetic,
            normalization: None,
        }
    }

    fn sample(vals: &[f64]) -> Image {
        Image::from_vec(ImageShape::new(1, 1, 2), vals.to_vec())
    }

    fn raw() -> Metric {
        Metric::raw(MetricKind::Euclidean)
    }

    #[test]
    fn visual_attribution_orders_by_min_distance() {
        let r = visual_attribution(&sample(&[0.0, 0.0]), &toy_data(), &raw()).unwrap();
        assert_eq!(r.entries, vec![(0, 0.0), (1, 5.0)]);
    }

    #[test]
    fn source_owning_the_sample_ranks_first() {
        let data = toy_data();
        let r = visual_attribution(&sample(&[3.0, 4.0]), &data, &raw()).unwrap();
        assert_eq!(r.entries[0].0, 1);
        assert_eq!(visual_similarity_rank(&data, &raw(), &sample(&[3.0, 4.0]), 1).unwrap(), 0.0);
        assert_eq!(visual_similarity_rank(&data, &raw(), &sample(&[3.0, 4.0]), 0).unwrap(), 1.0);
    }

    #[test]
    fn extra_far_image_never_hurts_a_source() {
        let mut data = toy_data();
        let base = visual_attribution(&sample(&[0.0, 0.0]), &data, &raw()).unwrap();
        data.pixels.extend_from_slice(&[100.0, 100.0]);
        data.sources.push(0);
        let with_far = visual_attribution(&sample(&[0.0, 0.0]), &data, &raw()).unwrap();
        let score = |r: &AttributionRanking, s: u32| {
            r.entries.iter().find(|&&(src, _)| src == s).unwrap().1
        };
        assert!(score(&with_far, 0) <= score(&base, 0));
    }

    #[test]
    fn counterfactual_attribution_is_inverse_ranked() {
        use crate::diffusion::SampleMode;
        use crate::landscape::LandscapeEntry;
        let l = CounterfactualLandscape {
            factual: Image::zeros(ImageShape::new(1, 1, 2)),
            eps_seed: 0,
            mode: SampleMode::Deterministic,
            metric: raw(),
            entries: vec![
                LandscapeEntry { source: 0, distance: 0.1, counterfactual: None },
                LandscapeEntry { source: 1, distance: 0.5, counterfactual: None },
            ],
            approximate: false,
            binarize_threshold: None,
        };
        let r = counterfactual_attribution(&l).unwrap();
        assert_eq!(r.entries, vec![(1, 0.5), (0, 0.1)]);
        assert_eq!(r.method, AttributionMethod::Counterfactual);
        // top-1 equals the radius argmax
        let radius = crate::landscape::counterfactual_radius(&l).unwrap();
        assert_eq!(r.entries[0].0, radius.argmax_source);

        let tied = CounterfactualLandscape {
            entries: vec![
                LandscapeEntry { source: 0, distance: 0.5, counterfactual: None },
                LandscapeEntry { source: 1, distance: 0.5, counterfactual: None },
            ],
            ..l
        };
        let rt = counterfactual_attribution(&tied).unwrap();
        assert_eq!(rt.entries[0].0, 0, "ties break by source id");
    }

    #[test]
    fn tied_middle_sources_share_visual_rank() {
        let data = Dataset {
            shape: ImageShape::new(1, 1, 1),
            pixels: vec![0.0, 1.0, 1.0],
            sources: vec![0, 1, 2],
            value_range: (0.0, 1.0),
            provenance: Provenance::Synthetic,
            normalization: None,
        };
        let q = Image::from_vec(ImageShape::new(1, 1, 1), vec![0.0]);
        assert_eq!(visual_similarity_rank(&data, &raw(), &q, 1).unwrap(), 0.75);
        assert_eq!(visual_similarity_rank(&data, &raw(), &q, 2).unwrap(), 0.75);
    }

    #[test]
    fn topk_intersection_examples() {
        let mk = |order: &[u32]| AttributionRanking {
            method: AttributionMethod::Visual,
            entries: order.iter().map(|&s| (s, s as f64)).collect(),
            ascending: true,
        };
        let a = mk(&[0, 1, 2, 3]);
        assert!(topk_intersection(&a, &a, 1).unwrap());
        let disjoint = mk(&[2, 3, 0, 1]);
        assert!(!topk_intersection(&a, &disjoint, 2).unwrap());
        assert!(topk_intersection(&a, &disjoint, 4).unwrap());
        assert!(matches!(
            topk_intersection(&a, &disjoint, 5),
            Err(AttributionError::KTooLarge { .. })
        ));
        let other = mk(&[0, 1, 2, 9]);
        assert!(matches!(
            topk_intersection(&a, &other, 2),
            Err(AttributionError::MismatchedUniverse)
        ));
    }

    #[test]
    fn scaling_the_metric_preserves_order() {
        let data = toy_data();
        let q = sample(&[1.0, 1.0]);
        let plain = visual_attribution(&q, &data, &raw()).unwrap();
        // scale both images and the query by 3: same order
        let scaled_data = Dataset {
            pixels: data.pixels.iter().map(|&v| v * 3.0).collect(),
            ..data.clone()
        };
        let scaled_q = sample(&[3.0, 3.0]);
        let scaled = visual_attribution(&scaled_q, &scaled_data, &raw()).unwrap();
        let order: Vec<u32> = plain.entries.iter().map(|&(s, _)| s).collect();
        let scaled_order: Vec<u32> = scaled.entries.iter().map(|&(s, _)| s).collect();
        assert_eq!(order, scaled_order);
    }

    #[test]
    fn intersection_stat_counts_and_scores() {
        let mk = |order: &[u32]| AttributionRanking {
            method: AttributionMethod::Counterfactual,
            entries: order.iter().map(|&s| (s, s as f64)).collect(),
            ascending: false,
        };
        let a = mk(&[0, 1, 2, 3]);
        let b = mk(&[3, 2, 1, 0]);
        let stat = intersection_stat(&[(&a, &a), (&a, &b)], 1).unwrap();
        assert_eq!(stat.trials, 2);
        assert_eq!(stat.hits, 1);
        let (mean, sd) = intersection_baseline(4, 1, 2);
        assert_eq!(stat.baseline_mean, mean);
        assert_eq!(stat.baseline_sd, sd);
    }

    #[test]
    fn csv_rows_enumerate_every_source() {
        let r = AttributionRanking {
            method: AttributionMethod::Visual,
            entries: vec![(1, 0.5), (0, 2.0)],
            ascending: true,
        };
        let rows = rankings_to_csv_rows(3, &[&r]);
        assert_eq!(rows, "3,visual,0,1,0.5\n3,visual,1,0,2\n");
    }
}
