//! Small dense image tensors and the fixed-order reductions used throughout.
//!
//! Compute is f64 end to end; datasets and checkpoints store f32 and widen
//! on load. Every reduction here iterates in a fixed order so results do
//! not depend on scheduling.

use serde::{Deserialize, Serialize};

/// Shape of one image: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image as a flat f64 buffer in channel-major (c, h, w) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: ImageShape,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(shape: ImageShape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn from_vec(shape: ImageShape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "shape/buffer mismatch");
        Self { shape, data }
    }

    pub fn from_f32(shape: ImageShape, data: &[f32]) -> Self {
        assert_eq!(shape.len(), data.len(), "shape/buffer mismatch");
        Self { shape, data: data.iter().map(|&v| v as f64).collect() }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw little-endian f64 bytes, for hashing and bit-exact comparisons.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Elementwise threshold: value > threshold maps to 1, else 0.
    pub fn binarize(&self, threshold: f64) -> Image {
        let data = self.data.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
        Image { shape: self.shape, data }
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Image {
        let ImageShape { channels, height, width } = self.shape;
        let mut out = Image::zeros(self.shape);
        for c in 0..channels {
            for y in 0..height {
                let row = (c * height + y) * width;
                for x in 0..width {
                    out.data[row + x] = self.data[row + (width - 1 - x)];
                }
            }
        }
        out
    }

    /// Nearest-neighbor resample of each channel to side x side.
    pub fn resample_nearest(&self, side: usize) -> Image {
        let ImageShape { channels, height, width } = self.shape;
        if height == side && width == side {
            return self.clone();
        }
        let mut out = Image::zeros(ImageShape::new(channels, side, side));
        for c in 0..channels {
            for y in 0..side {
                let sy = y * height / side;
                for x in 0..side {
                    let sx = x * width / side;
                    out.data[(c * side + y) * side + x] =
                        self.data[(c * height + sy) * width + sx];
                }
            }
        }
        out
    }
}

impl std::ops::Index<usize> for Image {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Euclidean distance between two equally shaped buffers, fixed order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// Balanced pairwise sum of pre-scaled member outputs.
///
/// The tree structure is fixed by the slice order (ascending member index),
/// so the reduction is independent of scheduling. A balanced tree also keeps
/// sums of equal values exact when the leaf count is a power of two, which
/// makes ablation of identical members reproduce the unablated output bit
/// for bit in the common even-split configurations.
pub fn tree_sum_into(terms: &[Vec<f64>], out: &mut [f64]) {
    assert!(!terms.is_empty(), "tree_sum over empty term list");
    for t in terms {
        assert_eq!(t.len(), out.len(), "term length mismatch");
    }
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = tree_sum_at(terms, i);
    }
}

fn tree_sum_at(terms: &[Vec<f64>], i: usize) -> f64 {
    match terms.len() {
        1 => terms[0][i],
        2 => terms[0][i] + terms[1][i],
        n => {
            let mid = n.div_ceil(2);
            tree_sum_at(&terms[..mid], i) + tree_sum_at(&terms[mid..], i)
        }
    }
}
