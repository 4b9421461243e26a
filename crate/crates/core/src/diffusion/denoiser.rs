//! A small convolutional noise predictor with sinusoidal time embedding:
//! two strided conv layers down, two upsample+conv layers back up, SiLU
//! nonlinearities, and a per-channel time bias injected at the bottleneck.
//! Two skip paths keep full-resolution signal available (the U-Net idiom
//! at desk scale): the first encoder activation is added back at the
//! matching decoder stage, and a parallel 3x3 conv maps the input straight
//! to the output.
//!
//! Parameters are stored as a flat f32 vector (the checkpoint payload);
//! all arithmetic runs in f64. The forward pass has a dual-number variant
//! that propagates a directional derivative with respect to the input
//! alongside the primal values, sharing the primal code path so both
//! agree bit for bit.

use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Schedule;
use crate::io as bin;
use crate::rng;
use crate::tensor::{Image, ImageShape};

pub const EMB_FREQS: usize = 16;
pub const EMB_DIM: usize = 2 * EMB_FREQS;
const CKPT_MAGIC: &[u8; 4] = b"ABCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint crc mismatch")]
    CrcMismatch,
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schedule error: {0}")]
    Schedule(#[from] super::DiffusionError),
}

/// Architecture descriptor: input channels, base width, image side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub channels: usize,
    pub width: usize,
    pub side: usize,
}

impl DenoiserArch {
    pub fn new(channels: usize, width: usize, side: usize) -> Result<Self, CheckpointError> {
        if channels == 0 || width == 0 {
            return Err(CheckpointError::BadArch("zero channels".into()));
        }
        if side < 8 || side % 4 != 0 {
            return Err(CheckpointError::BadArch(format!(
                "side {side} must be >= 8 and divisible by 4"
            )));
        }
        Ok(Self { channels, width, side })
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.side, self.side)
    }

    fn sizes(&self) -> [usize; 11] {
        let (c, w) = (self.channels, self.width);
        [
            w * c * 9,           // w1
            w,                   // b1
            2 * w * w * 9,       // w2
            2 * w,               // b2
            2 * w * EMB_DIM,     // wt
            2 * w,               // bt
            w * 2 * w * 9,       // w3
            w,                   // b3
            c * w * 9,           // w4
            c,                   // b4
            c * c * 9,           // w5 (input-to-output skip conv, no bias)
        ]
    }

    pub fn param_count(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn offsets(&self) -> [usize; 11] {
        let sizes = self.sizes();
        let mut offsets = [0usize; 11];
        let mut acc = 0;
        for (i, s) in sizes.iter().enumerate() {
            offsets[i] = acc;
            acc += s;
        }
        offsets
    }
}

/// Flat parameter vector plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub values: Vec<f32>,
}

impl DenoiserParams {
    /// Glorot-uniform initialization from a seeded stream.
    pub fn init(arch: DenoiserArch, seed: u64) -> Self {
        use rand::Rng;
        let mut stream = rng::stream(rng::derive_seed(seed, 0x1217));
        let mut values = vec![0.0f32; arch.param_count()];
        let offsets = arch.offsets();
        let sizes = arch.sizes();
        let (c, w) = (arch.channels, arch.width);
        // (weight block, fan_in, fan_out) per layer; biases stay zero
        let fans = [
            (0usize, c * 9, w * 9),
            (2, w * 9, 2 * w * 9),
            (4, EMB_DIM, 2 * w),
            (6, 2 * w * 9, w * 9),
            (8, w * 9, c * 9),
            (10, c * 9, c * 9),
        ];
        for (block, fan_in, fan_out) in fans {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for i in 0..sizes[block] {
                values[offsets[block] + i] = stream.random_range(-limit..limit) as f32;
            }
        }
        Self { arch, values }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn from_f64(arch: DenoiserArch, values: &[f64]) -> Self {
        Self { arch, values: values.iter().map(|&v| v as f32).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checkpoint bytes: "ABCK", version, arch, schedule, f32 payload,
    /// trailing CRC32 over everything before it.
    pub fn to_checkpoint_bytes(&self, sched: &Schedule) -> Vec<u8> {
        let mut w = Vec::new();
        w.write_all(CKPT_MAGIC).unwrap();
        bin::write_u32(&mut w, CKPT_VERSION).unwrap();
        bin::write_u32(&mut w, self.arch.channels as u32).unwrap();
        bin::write_u32(&mut w, self.arch.width as u32).unwrap();
        bin::write_u32(&mut w, self.arch.side as u32).unwrap();
        bin::write_u32(&mut w, EMB_DIM as u32).unwrap();
        bin::write_u32(&mut w, sched.t_train as u32).unwrap();
        bin::write_u32(&mut w, sched.sample_steps() as u32).unwrap();
        bin::write_f64(&mut w, sched.beta_lo).unwrap();
        bin::write_f64(&mut w, sched.beta_hi).unwrap();
        bin::write_u64(&mut w, self.values.len() as u64).unwrap();
        bin::write_f32_slice(&mut w, &self.values).unwrap();
        let crc = bin::crc32(&w);
        bin::write_u32(&mut w, crc).unwrap();
        w
    }

    pub fn save(&self, sched: &Schedule, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_bytes(sched))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Schedule), CheckpointError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if bin::crc32(body) != stored {
            return Err(CheckpointError::CrcMismatch);
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated("magic".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = bin::read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let channels = bin::read_u32(&mut r)? as usize;
        let width = bin::read_u32(&mut r)? as usize;
        let side = bin::read_u32(&mut r)? as usize;
        let emb = bin::read_u32(&mut r)? as usize;
        if emb != EMB_DIM {
            return Err(CheckpointError::BadArch(format!("embedding size {emb}")));
        }
        let t_train = bin::read_u32(&mut r)? as usize;
        let k = bin::read_u32(&mut r)? as usize;
        let beta_lo = bin::read_f64(&mut r)?;
        let beta_hi = bin::read_f64(&mut r)?;
        let count = bin::read_u64(&mut r)? as usize;
        let arch = DenoiserArch::new(channels, width, side)?;
        if count != arch.param_count() {
            return Err(CheckpointError::BadArch(format!(
                "parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let values = bin::read_f32_vec(&mut r, count)
            .map_err(|_| CheckpointError::Truncated("payload".into()))?;
        let sched = Schedule::new(t_train, k, beta_lo, beta_hi)?;
        Ok((Self { arch, values }, sched))
    }
}

/// Sinusoidal embedding of a timestep: 16 frequencies, sin then cos.
pub fn time_embedding(t: usize) -> [f64; EMB_DIM] {
    let mut emb = [0.0; EMB_DIM];
    for k in 0..EMB_FREQS {
        let freq = 10_000f64.powf(-(k as f64) / (EMB_FREQS as f64 - 1.0));
        let angle = t as f64 * freq;
        emb[k] = angle.sin();
        emb[EMB_FREQS + k] = angle.cos();
    }
    emb
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_deriv(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
fn conv3x3(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    stride: usize,
    out: &mut [f64],
) {
    let oh = if stride == 2 { h / 2 } else { h };
    let ow = if stride == 2 { w / 2 } else { w };
    debug_assert_eq!(out.len(), cout * oh * ow);
    for o in 0..cout {
        let base = o * oh * ow;
        let fill = bias.map_or(0.0, |b| b[o]);
        out[base..base + oh * ow].fill(fill);
        for i in 0..cin {
            let wbase = (o * cin + i) * 9;
            let ibase = i * h * w;
            for oy in 0..oh {
                let cy = (oy * stride) as isize - 1;
                for ox in 0..ow {
                    let cx = (ox * stride) as isize - 1;
                    let mut acc = 0.0;
                    for ky in 0..3usize {
                        let y = cy + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row = ibase + y as usize * w;
                        let wrow = wbase + ky * 3;
                        for kx in 0..3usize {
                            let x = cx + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += inp[row + x as usize] * weights[wrow + kx];
                        }
                    }
                    out[base + oy * ow + ox] += acc;
                }
            }
        }
    }
}

/// Scatter-form gradients for `conv3x3`: accumulates into dinp (optional),
/// dweights, and dbias.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    inp: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    stride: usize,
    dout: &[f64],
    dinp: Option<&mut [f64]>,
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    let oh = if stride == 2 { h / 2 } else { h };
    let ow = if stride == 2 { w / 2 } else { w };
    let mut dinp = dinp;
    for o in 0..cout {
        let base = o * oh * ow;
        for oy in 0..oh {
            let cy = (oy * stride) as isize - 1;
            for ox in 0..ow {
                let cx = (ox * stride) as isize - 1;
                let g = dout[base + oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                dbias[o] += g;
                for i in 0..cin {
                    let wbase = (o * cin + i) * 9;
                    let ibase = i * h * w;
                    for ky in 0..3usize {
                        let y = cy + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row = ibase + y as usize * w;
                        let wrow = wbase + ky * 3;
                        for kx in 0..3usize {
                            let x = cx + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            dweights[wrow + kx] += g * inp[row + x as usize];
                            if let Some(di) = dinp.as_deref_mut() {
                                di[row + x as usize] += g * weights[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn upsample2(inp: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = inp[(ch * h + y) * w + x];
                let base = (ch * oh + 2 * y) * ow + 2 * x;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
}

fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize, dinp: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = (ch * oh + 2 * y) * ow + 2 * x;
                dinp[(ch * h + y) * w + x] =
                    dout[base] + dout[base + 1] + dout[base + ow] + dout[base + ow + 1];
            }
        }
    }
}

/// Parameter slices by layer, viewed over a flat f64 vector.
pub(crate) struct Layers<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub wt: &'a [f64],
    pub bt: &'a [f64],
    pub w3: &'a [f64],
    pub b3: &'a [f64],
    pub w4: &'a [f64],
    pub b4: &'a [f64],
    pub w5: &'a [f64],
}

pub(crate) fn layers<'a>(arch: &DenoiserArch, p: &'a [f64]) -> Layers<'a> {
    debug_assert_eq!(p.len(), arch.param_count());
    let off = arch.offsets();
    let sz = arch.sizes();
    let s = |i: usize| &p[off[i]..off[i] + sz[i]];
    Layers {
        w1: s(0),
        b1: s(1),
        w2: s(2),
        b2: s(3),
        wt: s(4),
        bt: s(5),
        w3: s(6),
        b3: s(7),
        w4: s(8),
        b4: s(9),
        w5: s(10),
    }
}

/// Intermediate activations kept for the backward pass. Dropout multipliers
/// are the inverted-dropout masks (0 or 1/(1-p)); `None` means dropout off.
pub(crate) struct Caches {
    pub x: Vec<f64>,
    pub emb: [f64; EMB_DIM],
    pub h1: Vec<f64>,
    pub a1: Vec<f64>,
    pub h2b: Vec<f64>,
    pub u1: Vec<f64>,
    pub h3: Vec<f64>,
    pub u2: Vec<f64>,
    pub out: Vec<f64>,
    pub m1: Option<Vec<f64>>,
    pub m2: Option<Vec<f64>>,
    pub m3: Option<Vec<f64>>,
}

fn dropout_mask(len: usize, rate: f64, stream: &mut rng::Stream) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if stream.random_range(0.0..1.0) < rate { 0.0 } else { 1.0 / keep })
        .collect()
}

/// The full forward pass; `dropout` draws fresh masks from the stream when
/// the rate is positive (training only).
pub(crate) fn forward_cached(
    arch: &DenoiserArch,
    p: &[f64],
    x: &[f64],
    t: usize,
    dropout: Option<(f64, &mut rng::Stream)>,
) -> Caches {
    let l = layers(arch, p);
    let (c, ch, s) = (arch.channels, arch.width, arch.side);
    let (s2, s4) = (s / 2, s / 4);
    let emb = time_embedding(t);

    let mut h1 = vec![0.0; ch * s2 * s2];
    conv3x3(x, c, s, s, l.w1, Some(l.b1), ch, 2, &mut h1);
    let mut a1: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();

    let mut rate_stream = dropout;
    let m1 = match &mut rate_stream {
        Some((rate, stream)) if *rate > 0.0 => {
            let m = dropout_mask(a1.len(), *rate, stream);
            for (v, &k) in a1.iter_mut().zip(&m) {
                *v *= k;
            }
            Some(m)
        }
        _ => None,
    };

    let mut h2b = vec![0.0; 2 * ch * s4 * s4];
    conv3x3(&a1, ch, s2, s2, l.w2, Some(l.b2), 2 * ch, 2, &mut h2b);
    // per-channel time bias at the bottleneck
    for o in 0..2 * ch {
        let mut tb = l.bt[o];
        for (k, &e) in emb.iter().enumerate() {
            tb += l.wt[o * EMB_DIM + k] * e;
        }
        for v in &mut h2b[o * s4 * s4..(o + 1) * s4 * s4] {
            *v += tb;
        }
    }
    let mut a2: Vec<f64> = h2b.iter().map(|&v| silu(v)).collect();
    let m2 = match &mut rate_stream {
        Some((rate, stream)) if *rate > 0.0 => {
            let m = dropout_mask(a2.len(), *rate, stream);
            for (v, &k) in a2.iter_mut().zip(&m) {
                *v *= k;
            }
            Some(m)
        }
        _ => None,
    };

    let mut u1 = vec![0.0; 2 * ch * s2 * s2];
    upsample2(&a2, 2 * ch, s4, s4, &mut u1);
    let mut h3 = vec![0.0; ch * s2 * s2];
    conv3x3(&u1, 2 * ch, s2, s2, l.w3, Some(l.b3), ch, 1, &mut h3);
    // encoder skip: add the first-stage activation back in
    for (v, &a) in h3.iter_mut().zip(&a1) {
        *v += a;
    }
    let mut a3: Vec<f64> = h3.iter().map(|&v| silu(v)).collect();
    let m3 = match &mut rate_stream {
        Some((rate, stream)) if *rate > 0.0 => {
            let m = dropout_mask(a3.len(), *rate, stream);
            for (v, &k) in a3.iter_mut().zip(&m) {
                *v *= k;
            }
            Some(m)
        }
        _ => None,
    };

    let mut u2 = vec![0.0; ch * s * s];
    upsample2(&a3, ch, s2, s2, &mut u2);
    let mut out = vec![0.0; c * s * s];
    conv3x3(&u2, ch, s, s, l.w4, Some(l.b4), c, 1, &mut out);
    // full-resolution input path
    let mut skip = vec![0.0; c * s * s];
    conv3x3(x, c, s, s, l.w5, None, c, 1, &mut skip);
    for (v, &sk) in out.iter_mut().zip(&skip) {
        *v += sk;
    }

    Caches { x: x.to_vec(), emb, h1, a1, h2b, u1, h3, u2, out, m1, m2, m3 }
}

/// Accumulates parameter gradients for d(loss)/d(out) into `grads`.
pub(crate) fn backward(
    arch: &DenoiserArch,
    p: &[f64],
    caches: &Caches,
    dout: &[f64],
    grads: &mut [f64],
) {
    let l = layers(arch, p);
    let off = arch.offsets();
    let sz = arch.sizes();
    let (c, ch, s) = (arch.channels, arch.width, arch.side);
    let (s2, s4) = (s / 2, s / 4);

    // split the gradient buffer into per-layer views
    let (g0, rest) = grads.split_at_mut(off[1]);
    let (g1, rest) = rest.split_at_mut(sz[1]);
    let (g2, rest) = rest.split_at_mut(sz[2]);
    let (g3, rest) = rest.split_at_mut(sz[3]);
    let (g4, rest) = rest.split_at_mut(sz[4]);
    let (g5, rest) = rest.split_at_mut(sz[5]);
    let (g6, rest) = rest.split_at_mut(sz[6]);
    let (g7, rest) = rest.split_at_mut(sz[7]);
    let (g8, rest) = rest.split_at_mut(sz[8]);
    let (g9, g10) = rest.split_at_mut(sz[9]);

    // conv4 and the input skip conv share dout
    let mut du2 = vec![0.0; ch * s * s];
    conv3x3_backward(&caches.u2, ch, s, s, l.w4, c, 1, dout, Some(&mut du2), g8, g9);
    let mut unused_bias = vec![0.0; c];
    conv3x3_backward(&caches.x, c, s, s, l.w5, c, 1, dout, None, g10, &mut unused_bias);

    // upsample2 back to a3, through dropout and silu
    let mut da3 = vec![0.0; ch * s2 * s2];
    upsample2_backward(&du2, ch, s2, s2, &mut da3);
    if let Some(m) = &caches.m3 {
        for (v, &k) in da3.iter_mut().zip(m) {
            *v *= k;
        }
    }
    let dh3: Vec<f64> =
        da3.iter().zip(&caches.h3).map(|(&g, &h)| g * silu_deriv(h)).collect();

    // conv3
    let mut du1 = vec![0.0; 2 * ch * s2 * s2];
    conv3x3_backward(&caches.u1, 2 * ch, s2, s2, l.w3, ch, 1, &dh3, Some(&mut du1), g6, g7);

    // upsample2 back to a2, dropout, silu
    let mut da2 = vec![0.0; 2 * ch * s4 * s4];
    upsample2_backward(&du1, 2 * ch, s4, s4, &mut da2);
    if let Some(m) = &caches.m2 {
        for (v, &k) in da2.iter_mut().zip(m) {
            *v *= k;
        }
    }
    let dh2: Vec<f64> =
        da2.iter().zip(&caches.h2b).map(|(&g, &h)| g * silu_deriv(h)).collect();

    // time bias: dtb[o] sums over the bottleneck spatial extent
    for o in 0..2 * ch {
        let dtb: f64 = dh2[o * s4 * s4..(o + 1) * s4 * s4].iter().sum();
        g5[o] += dtb;
        for (k, &e) in caches.emb.iter().enumerate() {
            g4[o * EMB_DIM + k] += dtb * e;
        }
    }

    // conv2, plus the encoder-skip contribution from dh3
    let mut da1 = vec![0.0; ch * s2 * s2];
    conv3x3_backward(&caches.a1, ch, s2, s2, l.w2, 2 * ch, 2, &dh2, Some(&mut da1), g2, g3);
    for (v, &g) in da1.iter_mut().zip(&dh3) {
        *v += g;
    }
    if let Some(m) = &caches.m1 {
        for (v, &k) in da1.iter_mut().zip(m) {
            *v *= k;
        }
    }
    let dh1: Vec<f64> =
        da1.iter().zip(&caches.h1).map(|(&g, &h)| g * silu_deriv(h)).collect();

    // conv1 (input gradient not needed)
    conv3x3_backward(&caches.x, c, s, s, l.w1, ch, 2, &dh1, None, g0, g1);
}

/// Runtime denoiser: f64 copies of the parameters plus a forward-call
/// counter used by the cost-model instrumentation.
pub struct Denoiser {
    arch: DenoiserArch,
    p: Vec<f64>,
    calls: AtomicU64,
}

impl Denoiser {
    pub fn new(params: &DenoiserParams) -> Self {
        Self { arch: params.arch, p: params.to_f64(), calls: AtomicU64::new(0) }
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> DenoiserParams {
        DenoiserParams::from_f64(self.arch, &self.p)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Predicted noise for a (noisy image, timestep) pair.
    pub fn forward(&self, x: &Image, t: usize) -> Image {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let shape = self.arch.image_shape();
        debug_assert_eq!(x.shape, shape);
        let caches = forward_cached(&self.arch, &self.p, &x.data, t, None);
        Image::from_vec(shape, caches.out)
    }

    /// Primal prediction plus its directional derivative with respect to
    /// the input along `x_dot`. The primal half is bit-identical to
    /// `forward` because both run the same cached pass.
    pub fn forward_dual(&self, x: &Image, x_dot: &Image, t: usize) -> (Image, Image) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let shape = self.arch.image_shape();
        let l = layers(&self.arch, &self.p);
        let (c, ch, s) = (self.arch.channels, self.arch.width, self.arch.side);
        let (s2, s4) = (s / 2, s / 4);
        let emb = time_embedding(t);

        let mut h1 = vec![0.0; ch * s2 * s2];
        conv3x3(&x.data, c, s, s, l.w1, Some(l.b1), ch, 2, &mut h1);
        let mut d1 = vec![0.0; ch * s2 * s2];
        conv3x3(&x_dot.data, c, s, s, l.w1, None, ch, 2, &mut d1);
        let a1: Vec<f64> = h1.iter().map(|&v| silu(v)).collect();
        for (dv, &h) in d1.iter_mut().zip(&h1) {
            *dv *= silu_deriv(h);
        }

        let mut h2b = vec![0.0; 2 * ch * s4 * s4];
        conv3x3(&a1, ch, s2, s2, l.w2, Some(l.b2), 2 * ch, 2, &mut h2b);
        let mut d2 = vec![0.0; 2 * ch * s4 * s4];
        conv3x3(&d1, ch, s2, s2, l.w2, None, 2 * ch, 2, &mut d2);
        for o in 0..2 * ch {
            let mut tb = l.bt[o];
            for (k, &e) in emb.iter().enumerate() {
                tb += l.wt[o * EMB_DIM + k] * e;
            }
            for v in &mut h2b[o * s4 * s4..(o + 1) * s4 * s4] {
                *v += tb;
            }
        }
        let a2: Vec<f64> = h2b.iter().map(|&v| silu(v)).collect();
        for (dv, &h) in d2.iter_mut().zip(&h2b) {
            *dv *= silu_deriv(h);
        }

        let mut u1 = vec![0.0; 2 * ch * s2 * s2];
        upsample2(&a2, 2 * ch, s4, s4, &mut u1);
        let mut ud1 = vec![0.0; 2 * ch * s2 * s2];
        upsample2(&d2, 2 * ch, s4, s4, &mut ud1);
        let mut h3 = vec![0.0; ch * s2 * s2];
        conv3x3(&u1, 2 * ch, s2, s2, l.w3, Some(l.b3), ch, 1, &mut h3);
        for (v, &a) in h3.iter_mut().zip(&a1) {
            *v += a;
        }
        let mut d3 = vec![0.0; ch * s2 * s2];
        conv3x3(&ud1, 2 * ch, s2, s2, l.w3, None, ch, 1, &mut d3);
        for (dv, &da) in d3.iter_mut().zip(&d1) {
            *dv += da;
        }
        let a3: Vec<f64> = h3.iter().map(|&v| silu(v)).collect();
        for (dv, &h) in d3.iter_mut().zip(&h3) {
            *dv *= silu_deriv(h);
        }

        let mut u2 = vec![0.0; ch * s * s];
        upsample2(&a3, ch, s2, s2, &mut u2);
        let mut ud2 = vec![0.0; ch * s * s];
        upsample2(&d3, ch, s2, s2, &mut ud2);
        let mut out = vec![0.0; c * s * s];
        conv3x3(&u2, ch, s, s, l.w4, Some(l.b4), c, 1, &mut out);
        let mut skip = vec![0.0; c * s * s];
        conv3x3(&x.data, c, s, s, l.w5, None, c, 1, &mut skip);
        for (v, &sk) in out.iter_mut().zip(&skip) {
            *v += sk;
        }
        let mut dout = vec![0.0; c * s * s];
        conv3x3(&ud2, ch, s, s, l.w4, None, c, 1, &mut dout);
        let mut dskip = vec![0.0; c * s * s];
        conv3x3(&x_dot.data, c, s, s, l.w5, None, c, 1, &mut dskip);
        for (v, &sk) in dout.iter_mut().zip(&dskip) {
            *v += sk;
        }

        (Image::from_vec(shape, out), Image::from_vec(shape, dout))
    }
}
