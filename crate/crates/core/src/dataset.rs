//! Training data: a deterministic synthetic generator, IDX-format loading
//! for MNIST-compatible files, padding, normalization, and the "ABCD"
//! tensor cache format.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io as bin;
use crate::rng;
use crate::tensor::{Image, ImageShape};

const CACHE_MAGIC: &[u8; 4] = b"ABCD";
const CACHE_VERSION: u32 = 1;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cannot shrink images: side {side} -> target {target}")]
    ShrinkNotAllowed { side: usize, target: usize },
    #[error("zero scale in normalization")]
    ZeroScale,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Idx,
}

/// How datum indices map to source ids when loading labeled files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    /// Every image is its own data source.
    Datum,
    /// The class label is the data source.
    Label,
}

/// Normalization applied to pixel values: x -> (x - shift) * scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum NormalizationSpec {
    Affine { shift: f64, scale: f64 },
    /// Shift by the dataset mean and scale by the reciprocal standard
    /// deviation, computed over the whole tensor.
    Standardize,
}

impl NormalizationSpec {
    /// The MNIST-style transform: subtract 0.5, multiply by 2.
    pub fn mnist() -> Self {
        NormalizationSpec::Affine { shift: 0.5, scale: 2.0 }
    }
}

/// The affine parameters actually applied, recorded for exact inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedNormalization {
    pub shift: f64,
    pub scale: f64,
}

impl AppliedNormalization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) * self.scale
    }

    pub fn invert(&self, y: f64) -> f64 {
        y / self.scale + self.shift
    }
}

/// An immutable image collection with per-image source ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    /// count * shape.len() f32 values, image-major.
    pub pixels: Vec<f32>,
    /// Dense source ids, one per image.
    pub sources: Vec<u32>,
    /// Declared (lo, hi) bounds of the current value range.
    pub value_range: (f64, f64),
    pub provenance: Provenance,
    pub normalization: Option<AppliedNormalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn num_sources(&self) -> u32 {
        self.sources.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.shape.len();
        Image::from_f32(self.shape, &self.pixels[i * n..(i + 1) * n])
    }

    /// Image indices owned by one source, ascending.
    pub fn images_of_source(&self, source: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.sources[i] == source).collect()
    }

    /// Checks that source ids are dense 0..N-1 and every source owns at
    /// least one image.
    pub fn check_source_density(&self) -> Result<(), DatasetError> {
        let n = self.num_sources();
        let mut seen = vec![false; n as usize];
        for &s in &self.sources {
            seen[s as usize] = true;
        }
        if seen.iter().all(|&b| b) {
            Ok(())
        } else {
            Err(DatasetError::DimensionMismatch("source ids are not dense".into()))
        }
    }

    /// A view restricted to the given image indices (copies pixels).
    pub fn subset(&self, indices: &[u32]) -> Dataset {
        let n = self.shape.len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut sources = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
            sources.push(self.sources[i]);
        }
        Dataset { shape: self.shape, pixels, sources, ..*self }
    }
}

/// Deterministic synthetic images: each source is a template of 2 to 4
/// axis-aligned Gaussian blobs; each image adds small seeded pixel jitter.
/// Sources partition images round-robin, so counts differ by at most one.
pub fn generate_synthetic(
    count: usize,
    side: usize,
    n_sources: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if n_sources < 1 || count < n_sources {
        return Err(DatasetError::InvalidCount(format!(
            "need count >= n_sources >= 1, got count={count}, n_sources={n_sources}"
        )));
    }
    if !(8..=64).contains(&side) {
        return Err(DatasetError::InvalidCount(format!("side {side} outside [8, 64]")));
    }
    let shape = ImageShape::new(1, side, side);
    let mut templates = Vec::with_capacity(n_sources);
    for s in 0..n_sources {
        let mut rng = rng::stream(rng::derive_seed(seed, 0x7e6d_0000 + s as u64));
        let blobs = rng.random_range(2..=4u32);
        let mut tpl = vec![0.0f64; shape.len()];
        for _ in 0..blobs {
            let cx = rng.random_range(0.2..0.8) * side as f64;
            let cy = rng.random_range(0.2..0.8) * side as f64;
            let sx = rng.random_range(0.08..0.2) * side as f64;
            let sy = rng.random_range(0.08..0.2) * side as f64;
            let amp = rng.random_range(0.5..1.0);
            for y in 0..side {
                for x in 0..side {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let dy = (y as f64 + 0.5 - cy) / sy;
                    tpl[y * side + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
        templates.push(tpl);
    }
    let mut pixels = Vec::with_capacity(count * shape.len());
    let mut sources = Vec::with_capacity(count);
    for i in 0..count {
        let s = i % n_sources;
        let mut rng = rng::stream(rng::derive_seed(seed, 0x1a9e_0000 + i as u64));
        for &t in &templates[s] {
            let jitter = rng.random_range(-0.05..0.05);
            pixels.push((t + jitter).clamp(0.0, 1.0) as f32);
        }
        sources.push(s as u32);
    }
    Ok(Dataset {
        shape,
        pixels,
        sources,
        value_range: (0.0, 1.0),
        provenance: Provenance::Synthetic,
        normalization: None,
    })
}

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DatasetError::Truncated(what.to_string()))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads big-endian IDX image (magic 0x00000803) and optional label
/// (0x00000801) files. Pixels map to [0,1] by /255. With labels the label
/// is the source id; without, each image is its own source.
pub fn load_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    dedupe: bool,
) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(images_path)?;
    let mut r = Cursor::new(&bytes);
    let magic = read_be_u32(&mut r, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DatasetError::BadMagic { expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let count = read_be_u32(&mut r, "image count")? as usize;
    let height = read_be_u32(&mut r, "image height")? as usize;
    let width = read_be_u32(&mut r, "image width")? as usize;
    let mut raw = vec![0u8; count * height * width];
    r.read_exact(&mut raw)
        .map_err(|_| DatasetError::Truncated("image payload".to_string()))?;

    let labels: Option<Vec<u8>> = match labels_path {
        None => None,
        Some(path) => {
            let bytes = std::fs::read(path)?;
            let mut r = Cursor::new(&bytes);
            let magic = read_be_u32(&mut r, "label magic")?;
            if magic != IDX_LABEL_MAGIC {
                return Err(DatasetError::BadMagic { expected: IDX_LABEL_MAGIC, found: magic });
            }
            let n = read_be_u32(&mut r, "label count")? as usize;
            if n != count {
                return Err(DatasetError::DimensionMismatch(format!(
                    "{count} images but {n} labels"
                )));
            }
            let mut lab = vec![0u8; n];
            r.read_exact(&mut lab)
                .map_err(|_| DatasetError::Truncated("label payload".to_string()))?;
            Some(lab)
        }
    };

    let image_len = height * width;
    let mut keep: Vec<usize> = (0..count).collect();
    if dedupe {
        let mut seen = std::collections::HashSet::new();
        keep.retain(|&i| seen.insert(raw[i * image_len..(i + 1) * image_len].to_vec()));
    }

    let mut pixels = Vec::with_capacity(keep.len() * image_len);
    for &i in &keep {
        pixels.extend(
            raw[i * image_len..(i + 1) * image_len].iter().map(|&b| b as f32 / 255.0),
        );
    }
    let sources: Vec<u32> = match &labels {
        Some(lab) => {
            // densify distinct labels in ascending order
            let distinct: Vec<u8> = {
                let mut set: Vec<u8> = keep.iter().map(|&i| lab[i]).collect();
                set.sort_unstable();
                set.dedup();
                set
            };
            keep.iter()
                .map(|&i| distinct.binary_search(&lab[i]).unwrap() as u32)
                .collect()
        }
        None => (0..keep.len() as u32).collect(),
    };

    let ds = Dataset {
        shape: ImageShape::new(1, height, width),
        pixels,
        sources,
        value_range: (0.0, 1.0),
        provenance: Provenance::Idx,
        normalization: None,
    };
    ds.check_source_density()?;
    Ok(ds)
}

/// Writes images (scaled back to u8 by *255) and sources as IDX files.
/// A dataset loaded from IDX and written back is byte-identical.
pub fn write_idx(
    ds: &Dataset,
    images_path: &Path,
    labels_path: Option<&Path>,
) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend_from_slice(&(ds.shape.height as u32).to_be_bytes());
    out.extend_from_slice(&(ds.shape.width as u32).to_be_bytes());
    for &v in &ds.pixels {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(images_path, out)?;
    if let Some(path) = labels_path {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
        for &s in &ds.sources {
            out.push(s as u8);
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}

/// Center-pads every image to target_side x target_side with zeros
/// (pre-normalization black). Pixel sums are unchanged.
pub fn pad_images(ds: &Dataset, target_side: usize) -> Result<Dataset, DatasetError> {
    let ImageShape { channels, height, width } = ds.shape;
    let side = height.max(width);
    if target_side < side {
        return Err(DatasetError::ShrinkNotAllowed { side, target: target_side });
    }
    if target_side == height && target_side == width {
        return Ok(ds.clone());
    }
    let top = (target_side - height) / 2;
    let left = (target_side - width) / 2;
    let new_shape = ImageShape::new(channels, target_side, target_side);
    let mut pixels = vec![0.0f32; ds.len() * new_shape.len()];
    for i in 0..ds.len() {
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let src = ((i * channels + c) * height + y) * width + x;
                    let dst = ((i * channels + c) * target_side + y + top) * target_side
                        + x
                        + left;
                    pixels[dst] = ds.pixels[src];
                }
            }
        }
    }
    Ok(Dataset { shape: new_shape, pixels, ..ds.clone() })
}

/// Applies a normalization spec and records the exact affine parameters
/// used, so `denormalize` inverts to within float rounding.
pub fn normalize(ds: &Dataset, spec: NormalizationSpec) -> Result<Dataset, DatasetError> {
    let applied = match spec {
        NormalizationSpec::Affine { shift, scale } => {
            if scale == 0.0 {
                return Err(DatasetError::ZeroScale);
            }
            AppliedNormalization { shift, scale }
        }
        NormalizationSpec::Standardize => {
            let n = ds.pixels.len() as f64;
            let mean = ds.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ds
                .pixels
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            if sd == 0.0 {
                return Err(DatasetError::ZeroScale);
            }
            AppliedNormalization { shift: mean, scale: 1.0 / sd }
        }
    };
    let pixels: Vec<f32> =
        ds.pixels.iter().map(|&v| applied.apply(v as f64) as f32).collect();
    let (lo, hi) = ds.value_range;
    let (a, b) = (applied.apply(lo), applied.apply(hi));
    Ok(Dataset {
        pixels,
        value_range: (a.min(b), a.max(b)),
        normalization: Some(applied),
        ..ds.clone()
    })
}

pub fn denormalize(ds: &Dataset) -> Dataset {
    match ds.normalization {
        None => ds.clone(),
        Some(applied) => {
            let pixels: Vec<f32> =
                ds.pixels.iter().map(|&v| applied.invert(v as f64) as f32).collect();
            let (lo, hi) = ds.value_range;
            let (a, b) = (applied.invert(lo), applied.invert(hi));
            Dataset {
                pixels,
                value_range: (a.min(b), a.max(b)),
                normalization: None,
                ..ds.clone()
            }
        }
    }
}

/// Midpoint of the declared value range; the default binarization
/// threshold.
pub fn range_midpoint(ds: &Dataset) -> f64 {
    (ds.value_range.0 + ds.value_range.1) / 2.0
}

/// Saves in the "ABCD" cache format: magic, version, count/channels/
/// height/width (u32 LE), f32 LE pixels, u32 LE source ids, and a JSON
/// trailer with range/provenance metadata.
pub fn save_cache(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = Vec::new();
    w.write_all(CACHE_MAGIC)?;
    bin::write_u32(&mut w, CACHE_VERSION)?;
    bin::write_u32(&mut w, ds.len() as u32)?;
    bin::write_u32(&mut w, ds.shape.channels as u32)?;
    bin::write_u32(&mut w, ds.shape.height as u32)?;
    bin::write_u32(&mut w, ds.shape.width as u32)?;
    bin::write_f32_slice(&mut w, &ds.pixels)?;
    for &s in &ds.sources {
        bin::write_u32(&mut w, s)?;
    }
    let meta = serde_json::json!({
        "value_range": ds.value_range,
        "provenance": ds.provenance,
        "normalization": ds.normalization,
    });
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    bin::write_u32(&mut w, meta.len() as u32)?;
    w.write_all(&meta)?;
    std::fs::write(path, w)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DatasetError::Truncated("magic".into()))?;
    if &magic != CACHE_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: u32::from_le_bytes(*CACHE_MAGIC),
            found: u32::from_le_bytes(magic),
        });
    }
    let version = bin::read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(DatasetError::DimensionMismatch(format!(
            "unsupported cache version {version}"
        )));
    }
    let count = bin::read_u32(&mut r)? as usize;
    let channels = bin::read_u32(&mut r)? as usize;
    let height = bin::read_u32(&mut r)? as usize;
    let width = bin::read_u32(&mut r)? as usize;
    let shape = ImageShape::new(channels, height, width);
    let pixels = bin::read_f32_vec(&mut r, count * shape.len())
        .map_err(|_| DatasetError::Truncated("pixel payload".into()))?;
    let mut sources = Vec::with_capacity(count);
    for _ in 0..count {
        sources.push(bin::read_u32(&mut r).map_err(|_| DatasetError::Truncated("sources".into()))?);
    }
    #[derive(Deserialize)]
    struct Meta {
        value_range: (f64, f64),
        provenance: Provenance,
        normalization: Option<AppliedNormalization>,
    }
    let meta_len = bin::read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(|_| DatasetError::Truncated("metadata".into()))?;
    let meta: Meta = serde_json::from_slice(&meta)
        .map_err(|e| DatasetError::DimensionMismatch(format!("metadata: {e}")))?;
    let ds = Dataset {
        shape,
        pixels,
        sources,
        value_range: meta.value_range,
        provenance: meta.provenance,
        normalization: meta.normalization,
    };
    ds.check_source_density()?;
    Ok(ds)
}

/// Per-source image counts, mostly for reports.
pub fn source_histogram(ds: &Dataset) -> BTreeMap<u32, usize> {
    let mut map = BTreeMap::new();
    for &s in &ds.sources {
        *map.entry(s).or_insert(0) += 1;
    }
    map
}
