//! Deterministic lossy autoencoder.
//!
//! `encode`: binomial blur, `k x k` block average, clamp to `[-R, R]`, uniform
//! quantization to `Q` cells with midpoint reconstruction.
//! `decode`: nearest-neighbour upsample, then unsharp mask `x + u (x - blur x)`.
//! All kernels use replicate padding.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, LatentGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub downsample: usize,
    pub levels: usize,
    pub range: f64,
    pub unsharp: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            downsample: 2,
            levels: 32,
            range: 4.0,
            unsharp: 0.15,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::InvalidRange("downsample factor must be at least 1".into()));
        }
        if self.levels < 2 {
            return Err(Error::InvalidRange("need at least 2 quantization levels".into()));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::InvalidRange("clamp range must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unsharp) {
            return Err(Error::InvalidRange("unsharp gain must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn cell(&self) -> f64 {
        2.0 * self.range / self.levels as f64
    }

    /// Reconstruction value of quantization cell `i`.
    pub fn lattice_point(&self, i: usize) -> f64 {
        -self.range + (i as f64 + 0.5) * self.cell()
    }

    pub fn quantize(&self, v: f64) -> f64 {
        let clamped = v.clamp(-self.range, self.range);
        let i = ((clamped + self.range) / self.cell()).floor();
        let i = (i.max(0.0) as usize).min(self.levels - 1);
        self.lattice_point(i)
    }

    /// Whether `v` is one of the `Q` reconstruction values.
    pub fn on_lattice(&self, v: f64) -> bool {
        let pos = (v + self.range) / self.cell() - 0.5;
        let i = pos.round();
        i >= 0.0 && i < self.levels as f64 && (self.lattice_point(i as usize) - v).abs() < 1e-12
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        self.validate()?;
        let k = self.downsample;
        if !image.h.is_multiple_of(k) || !image.w.is_multiple_of(k) {
            return Err(Error::dims(
                format!("image sides divisible by {k}"),
                image,
            ));
        }
        Ok(Dims { h: image.h / k, w: image.w / k, c: image.c })
    }
}

/// Separable `[1, 2, 1] / 4` blur per channel with replicate padding.
pub fn binomial_blur(g: &LatentGrid) -> LatentGrid {
    let Dims { h, w, c } = g.dims();
    let src = g.as_slice();
    let idx = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            for ch in 0..c {
                horiz[idx(y, x, ch)] =
                    0.25 * src[idx(y, xl, ch)] + 0.5 * src[idx(y, x, ch)] + 0.25 * src[idx(y, xr, ch)];
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let yu = y.saturating_sub(1);
        let yd = (y + 1).min(h - 1);
        for x in 0..w {
            for ch in 0..c {
                out[idx(y, x, ch)] = 0.25 * horiz[idx(yu, x, ch)]
                    + 0.5 * horiz[idx(y, x, ch)]
                    + 0.25 * horiz[idx(yd, x, ch)];
            }
        }
    }
    LatentGrid::from_parts(g.dims(), out)
}

/// Codec with call counters, so callers can audit how often each side ran.
#[derive(Debug, Default)]
pub struct Codec {
    cfg: CodecConfig,
    encodes: AtomicUsize,
    decodes: AtomicUsize,
}

impl Clone for Codec {
    fn clone(&self) -> Self {
        Self::new(self.cfg).expect("config validated on construction")
    }
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn encode_calls(&self) -> usize {
        self.encodes.load(Ordering::Relaxed)
    }

    pub fn decode_calls(&self) -> usize {
        self.decodes.load(Ordering::Relaxed)
    }

    pub fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        self.encodes.fetch_add(1, Ordering::Relaxed);
        encode(image, &self.cfg)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        self.decodes.fetch_add(1, Ordering::Relaxed);
        decode(latent, &self.cfg)
    }
}

pub fn encode(image: &LatentGrid, cfg: &CodecConfig) -> Result<LatentGrid> {
    let ld = cfg.latent_dims(image.dims())?;
    let k = cfg.downsample;
    let blurred = binomial_blur(image);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(ld.len());
    for y in 0..ld.h {
        for x in 0..ld.w {
            for ch in 0..ld.c {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += blurred.get(y * k + dy, x * k + dx, ch);
                    }
                }
                out.push(cfg.quantize(s * norm));
            }
        }
    }
    Ok(LatentGrid::from_parts(ld, out))
}

pub fn decode(latent: &LatentGrid, cfg: &CodecConfig) -> Result<LatentGrid> {
    cfg.validate()?;
    let k = cfg.downsample;
    let Dims { h, w, c } = latent.dims();
    let dims = Dims { h: h * k, w: w * k, c };
    let mut up = Vec::with_capacity(dims.len());
    for y in 0..dims.h {
        for x in 0..dims.w {
            for ch in 0..c {
                up.push(latent.get(y / k, x / k, ch));
            }
        }
    }
    let up = LatentGrid::from_parts(dims, up);
    if cfg.unsharp == 0.0 {
        return Ok(up);
    }
    let blurred = binomial_blur(&up);
    let u = cfg.unsharp;
    up.zip_map(&blurred, |x, b| x + u * (x - b))
}

/// RMSE against the original after each of `n` decode-encode round trips
/// (image space).
pub fn roundtrip_drift(image: &LatentGrid, n: usize, cfg: &CodecConfig) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidRange("need at least one round trip".into()));
    }
    let mut x = image.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        x = decode(&encode(&x, cfg)?, cfg)?;
        out.push(x.rmse(image)?);
    }
    Ok(out)
}

/// Checkerboard over a horizontal ramp, offset away from zero mean.
///
/// Values stay well inside the default clamp range. The checker edges keep
/// diffusing under repeated round trips for a dozen or so iterations.
pub fn structured_fixture(size: usize, cell: usize, amplitude: f64, ramp: f64, offset: f64) -> Result<LatentGrid> {
    let mut g = LatentGrid::zeros(size, size, 1)?;
    let span = (size.max(2) - 1) as f64;
    for y in 0..size {
        for x in 0..size {
            let r = offset + (x as f64 / span - 0.5) * 2.0 * ramp;
            let check = if (x / cell + y / cell).is_multiple_of(2) { amplitude } else { -amplitude };
            g.set(y, x, 0, r + check);
        }
    }
    Ok(g)
}

/// The fixture shipped in `fixtures/structured.grid`.
pub fn default_fixture() -> LatentGrid {
    structured_fixture(64, 8, 2.5, 0.5, 0.75).expect("static dimensions")
}
