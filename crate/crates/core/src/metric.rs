//! Image distance metrics. Landscape distances are computed at a canonical
//! resolution (nearest-neighbor resample, default 32x32) so values are
//! comparable across image sizes; attribution can also use the raw
//! resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{euclidean, Image};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(crate::tensor::ImageShape, crate::tensor::ImageShape),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Euclidean,
    /// min(d(a, b), d(a, flip_h(b))) in Euclidean distance.
    FlipEuclidean,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::FlipEuclidean => "flip-euclidean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(MetricKind::Euclidean),
            "flip-euclidean" | "flip_euclidean" => Some(MetricKind::FlipEuclidean),
            _ => None,
        }
    }
}

/// A distance function with an optional canonical resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    /// Resample both images to this side before measuring, when set.
    pub canonical_side: Option<usize>,
}

pub const CANONICAL_SIDE: usize = 32;

impl Metric {
    /// Euclidean at the canonical 32x32 resolution; the landscape default.
    pub fn canonical_euclidean() -> Self {
        Metric { kind: MetricKind::Euclidean, canonical_side: Some(CANONICAL_SIDE) }
    }

    /// Raw-resolution distance, no resampling.
    pub fn raw(kind: MetricKind) -> Self {
        Metric { kind, canonical_side: None }
    }

    pub fn with_canonical(kind: MetricKind) -> Self {
        Metric { kind, canonical_side: Some(CANONICAL_SIDE) }
    }

    pub fn name(&self) -> String {
        match self.canonical_side {
            Some(side) => format!("{}@{side}", self.kind.name()),
            None => self.kind.name().to_string(),
        }
    }

    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64, MetricError> {
        if a.shape != b.shape {
            return Err(MetricError::ShapeMismatch(a.shape, b.shape));
        }
        let (ca, cb);
        let (a, b) = match self.canonical_side {
            Some(side) if side != a.shape.height || side != a.shape.width => {
                ca = a.resample_nearest(side);
                cb = b.resample_nearest(side);
                (&ca, &cb)
            }
            _ => (a, b),
        };
        Ok(match self.kind {
            MetricKind::Euclidean => euclidean(&a.data, &b.data),
            MetricKind::FlipEuclidean => flip_agnostic_euclidean(a, b),
        })
    }
}

/// Minimum of the Euclidean distance to the image and to its horizontal
/// mirror.
pub fn flip_agnostic_euclidean(a: &Image, b: &Image) -> f64 {
    let plain = euclidean(&a.data, &b.data);
    let flipped = euclidean(&a.data, &b.flip_horizontal().data);
    plain.min(flipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageShape;

    fn img(vals: &[f64], w: usize) -> Image {
        Image::from_vec(ImageShape::new(1, 1, w), vals.to_vec())
    }

    #[test]
    fn flip_agnostic_of_mirror_is_zero() {
        let a = img(&[1.0, 2.0, 3.0], 3);
        let b = a.flip_horizontal();
        assert_eq!(flip_agnostic_euclidean(&a, &b), 0.0);
    }

    #[test]
    fn flip_agnostic_equals_plain_for_symmetric_images() {
        let a = img(&[1.0, 2.0, 1.0], 3);
        let b = img(&[0.5, 0.0, 0.5], 3);
        assert_eq!(flip_agnostic_euclidean(&a, &b), euclidean(&a.data, &b.data));
    }

    #[test]
    fn flip_agnostic_never_exceeds_plain() {
        let a = img(&[0.9, -0.2, 0.4, 0.1], 4);
        let b = img(&[0.3, 0.8, -0.5, 0.2], 4);
        assert!(flip_agnostic_euclidean(&a, &b) <= euclidean(&a.data, &b.data));
    }

    #[test]
    fn canonical_distance_matches_direct_at_canonical_size() {
        let shape = ImageShape::new(1, 32, 32);
        let a = Image::from_vec(shape, (0..1024).map(|i| (i % 7) as f64).collect());
        let b = Image::from_vec(shape, (0..1024).map(|i| (i % 5) as f64).collect());
        let canonical = Metric::canonical_euclidean().distance(&a, &b).unwrap();
        let raw = Metric::raw(MetricKind::Euclidean).distance(&a, &b).unwrap();
        assert!((canonical - raw).abs() < 1e-6);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = img(&[1.0], 1);
        let b = img(&[1.0, 2.0], 2);
        assert!(Metric::raw(MetricKind::Euclidean).distance(&a, &b).is_err());
    }
}
