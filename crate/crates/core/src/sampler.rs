//! Forward noising, reverse diffusion steps, masked denoising and Langevin
//! sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, GmmPrior};
use crate::error::{Error, Result};
use crate::grid::{gaussian_like, Dims, LatentGrid, Mask, RngStream};
use crate::schedule::{NoiseSchedule, StepCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMethod {
    /// Posterior-mean ancestral step with the `1/sqrt(alpha)` and
    /// `beta/sqrt(1 - alpha_bar)` coefficients.
    #[default]
    DdpmFull,
    /// `z - eps + sigma * xi`, coefficients omitted.
    DdpmLiteral,
    EulerAncestral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Zero the noise prediction outside the mask and nothing else.
    #[serde(rename = "eq8_literal")]
    Eq8Literal,
    /// Reset the frozen region to the forward-noised source after each step.
    #[default]
    Pin,
    /// Outside the mask, use the reconstruction prediction instead of the edit's.
    Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: ReverseMethod,
    pub mask_mode: MaskMode,
    pub add_final_noise: bool,
}

/// One Markov noising step `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) xi`.
pub fn forward_step(
    z_prev: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<LatentGrid> {
    let beta = sched.query(t)?.beta;
    let keep = (1.0 - beta).sqrt();
    let noise = beta.sqrt();
    let xi = gaussian_like(rng, z_prev.dims());
    z_prev.zip_map(&xi, |v, x| keep * v + noise * x)
}

/// Closed-form jump `z_t = sqrt(ab) z_0 + sqrt(1 - ab) eps`. `t = 0` returns
/// `z_0` unchanged.
pub fn noise_to(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        z0.ensure_same_dims(eps)?;
        return Ok(z0.clone());
    }
    noise_with_alpha_bar(z0, sched.query(t)?.alpha_bar, eps)
}

pub fn noise_with_alpha_bar(z0: &LatentGrid, alpha_bar: f64, eps: &LatentGrid) -> Result<LatentGrid> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    z0.zip_map(eps, |z, e| a * z + e * b)
}

/// The reverse-step arithmetic for given coefficients. `noise` is `None` when
/// no noise is injected.
pub(crate) fn step_kernel(
    method: ReverseMethod,
    q: StepCoefficients,
    alpha_bar_prev: f64,
    z_t: &LatentGrid,
    eps: &LatentGrid,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    z_t.ensure_same_dims(eps)?;
    let mut out = match method {
        ReverseMethod::DdpmLiteral => z_t.zip_map(eps, |z, e| z - e)?,
        ReverseMethod::DdpmFull => {
            let coef = q.beta / (1.0 - q.alpha_bar).sqrt();
            let inv = 1.0 / q.alpha.sqrt();
            z_t.zip_map(eps, |z, e| inv * (z - coef * e))?
        }
        ReverseMethod::EulerAncestral => {
            let noise_frac = (1.0 - q.alpha_bar).sqrt();
            let root = q.alpha_bar.sqrt();
            let root_prev = alpha_bar_prev.sqrt();
            let tilde2 = euler_sigma2(q, alpha_bar_prev);
            let dir = (1.0 - alpha_bar_prev - tilde2).max(0.0).sqrt();
            z_t.zip_map(eps, |z, e| {
                let x0 = (z - noise_frac * e) / root;
                root_prev * x0 + dir * e
            })?
        }
    };
    if let Some(xi) = noise {
        out.ensure_same_dims(xi)?;
        let scale = match method {
            ReverseMethod::EulerAncestral => euler_sigma2(q, alpha_bar_prev).sqrt(),
            _ => q.sigma,
        };
        for (o, x) in out.as_mut_slice().iter_mut().zip(xi.as_slice()) {
            *o += scale * x;
        }
    }
    Ok(out)
}

fn euler_sigma2(q: StepCoefficients, alpha_bar_prev: f64) -> f64 {
    (1.0 - alpha_bar_prev) / (1.0 - q.alpha_bar) * q.beta
}

fn injects_noise(t: usize, cfg: &SamplerConfig) -> bool {
    t > 1 || cfg.add_final_noise
}

/// One reverse step `z_t -> z_{t-1}` given the noise prediction.
pub fn reverse_step(
    z_t: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<LatentGrid> {
    let q = sched.query(t)?;
    let ab_prev = sched.alpha_bar_or_one(t - 1)?;
    let noise = injects_noise(t, cfg).then(|| gaussian_like(rng, z_t.dims()));
    step_kernel(cfg.method, q, ab_prev, z_t, eps_hat, noise.as_ref())
}

/// What a masked step needs besides the mask itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskInputs<'a> {
    /// Source latent the frozen region is pinned to (pin mode).
    pub z_src: Option<&'a LatentGrid>,
    /// Reconstruction noise prediction (direction mode).
    pub eps_recon: Option<&'a LatentGrid>,
}

fn select(mask: &Mask, inside: &LatentGrid, outside: &LatentGrid) -> Result<LatentGrid> {
    inside.ensure_same_dims(outside)?;
    mask.ensure_matches(inside.dims())?;
    let c = inside.channels();
    let data = inside
        .as_slice()
        .iter()
        .zip(outside.as_slice())
        .enumerate()
        .map(|(i, (&a, &b))| if mask.at_element(i, c) { a } else { b })
        .collect();
    LatentGrid::new(inside.height(), inside.width(), c, data)
}

#[allow(clippy::too_many_arguments)]
pub fn masked_reverse_step(
    z_t: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    mask: &Mask,
    inputs: MaskInputs<'_>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<LatentGrid> {
    mask.ensure_matches(z_t.dims())?;
    match cfg.mask_mode {
        MaskMode::Eq8Literal => {
            let c = eps_hat.channels();
            let data = eps_hat
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &e)| if mask.at_element(i, c) { e } else { 0.0 })
                .collect();
            let masked = LatentGrid::new(eps_hat.height(), eps_hat.width(), c, data)?;
            reverse_step(z_t, t, &masked, sched, cfg, rng)
        }
        MaskMode::Pin => {
            let z_src = inputs.z_src.ok_or(Error::MissingSource { mode: "pin" })?;
            z_src.ensure_same_dims(z_t)?;
            let stepped = reverse_step(z_t, t, eps_hat, sched, cfg, rng)?;
            if mask.is_all_ones() {
                return Ok(stepped);
            }
            let frozen = if t > 1 {
                let xi = gaussian_like(rng, z_t.dims());
                noise_to(z_src, t - 1, &xi, sched)?
            } else {
                z_src.clone()
            };
            select(mask, &stepped, &frozen)
        }
        MaskMode::Direction => {
            let recon = inputs.eps_recon.ok_or(Error::MissingSource { mode: "direction" })?;
            let eps = select(mask, eps_hat, recon)?;
            reverse_step(z_t, t, &eps, sched, cfg, rng)
        }
    }
}

/// Mask plus the sources the masking modes draw on.
#[derive(Clone, Copy)]
pub struct MaskGuide<'a> {
    pub mask: &'a Mask,
    pub z_src: Option<&'a LatentGrid>,
    /// Predictor used for `eps_recon` in direction mode.
    pub recon: Option<&'a dyn Denoiser>,
}

/// Runs the reverse chain from a fresh `z_T ~ N(0, I)`.
pub fn sample(
    denoiser: &dyn Denoiser,
    dims: Dims,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
    guide: Option<MaskGuide<'_>>,
) -> Result<LatentGrid> {
    let init = gaussian_like(rng, dims);
    sample_from(init, denoiser, sched, cfg, rng, guide)
}

/// Runs the reverse chain `t = T..1` starting from `init`.
pub fn sample_from(
    init: LatentGrid,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
    guide: Option<MaskGuide<'_>>,
) -> Result<LatentGrid> {
    if let Some(g) = &guide {
        g.mask.ensure_matches(init.dims())?;
        match cfg.mask_mode {
            MaskMode::Pin if g.z_src.is_none() => return Err(Error::MissingSource { mode: "pin" }),
            MaskMode::Direction if g.recon.is_none() => {
                return Err(Error::MissingSource { mode: "direction" })
            }
            _ => {}
        }
    }
    let mut z = init;
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict(&z, t, sched)?;
        z = match &guide {
            None => reverse_step(&z, t, &eps, sched, cfg, rng)?,
            Some(g) => {
                let recon = match (cfg.mask_mode, g.recon) {
                    (MaskMode::Direction, Some(r)) => Some(r.predict(&z, t, sched)?),
                    _ => None,
                };
                let inputs = MaskInputs {
                    z_src: g.z_src,
                    eps_recon: recon.as_ref(),
                };
                masked_reverse_step(&z, t, &eps, g.mask, inputs, sched, cfg, rng)?
            }
        };
        if !z.is_finite() {
            return Err(Error::Divergence { iteration: sched.steps() + 1 - t });
        }
    }
    Ok(z)
}

/// `n` independent unmasked chains; chain `i` uses stream `(seed, i)`, so the
/// result does not depend on how many threads run them.
pub fn sample_many(
    denoiser: &dyn Denoiser,
    dims: Dims,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<LatentGrid>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::derived(seed, i as u64);
            sample(denoiser, dims, sched, cfg, &mut rng, None)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Energy-based sampling
// ---------------------------------------------------------------------------

pub trait EnergyFn: Sync {
    fn energy(&self, z: &LatentGrid) -> Result<f64>;
    fn gradient(&self, z: &LatentGrid) -> Result<LatentGrid>;
}

/// `E(z) = |z|^2 / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticEnergy;

impl EnergyFn for QuadraticEnergy {
    fn energy(&self, z: &LatentGrid) -> Result<f64> {
        Ok(0.5 * z.as_slice().iter().map(|v| v * v).sum::<f64>())
    }

    fn gradient(&self, z: &LatentGrid) -> Result<LatentGrid> {
        Ok(z.clone())
    }
}

/// `E(z) = -log p(z)` for a mixture with strictly positive scales.
#[derive(Debug, Clone, Copy)]
pub struct MixtureEnergy<'a> {
    prior: &'a GmmPrior,
}

impl<'a> MixtureEnergy<'a> {
    pub fn new(prior: &'a GmmPrior) -> Result<Self> {
        if prior.components().iter().any(|c| c.scale <= 0.0) {
            return Err(Error::InvalidRange(
                "mixture energy needs positive component scales".into(),
            ));
        }
        Ok(Self { prior })
    }
}

impl EnergyFn for MixtureEnergy<'_> {
    fn energy(&self, z: &LatentGrid) -> Result<f64> {
        Ok(-self.prior.log_density(z, 1.0)?)
    }

    fn gradient(&self, z: &LatentGrid) -> Result<LatentGrid> {
        Ok(self.prior.score(z, 1.0)?.scale(-1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseScale {
    Constant(f64),
    PerStep(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    pub step_size: f64,
    /// Standard deviation `omega` of the injected noise; `sqrt(step_size)`
    /// when omitted.
    #[serde(default)]
    pub noise_scale: Option<NoiseScale>,
    pub steps: usize,
}

impl LangevinConfig {
    pub fn new(step_size: f64, steps: usize) -> Self {
        Self {
            step_size,
            noise_scale: None,
            steps,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "Langevin step size {} must be positive",
                self.step_size
            )));
        }
        match &self.noise_scale {
            Some(NoiseScale::Constant(w)) if *w < 0.0 => {
                Err(Error::InvalidRange("noise scale must be nonnegative".into()))
            }
            Some(NoiseScale::PerStep(ws)) if ws.len() != self.steps || ws.iter().any(|w| *w < 0.0) => {
                Err(Error::InvalidRange(format!(
                    "per-step noise needs {} nonnegative entries",
                    self.steps
                )))
            }
            _ => Ok(()),
        }
    }

    fn omega(&self, step: usize) -> f64 {
        match &self.noise_scale {
            None => self.step_size.sqrt(),
            Some(NoiseScale::Constant(w)) => *w,
            Some(NoiseScale::PerStep(ws)) => ws[step],
        }
    }
}

/// `z <- z - (step/2) grad E(z) + N(0, omega^2 I)`, `steps` times.
pub fn langevin_sample(
    energy: &dyn EnergyFn,
    cfg: &LangevinConfig,
    init: LatentGrid,
    rng: &mut RngStream,
) -> Result<LatentGrid> {
    cfg.validate()?;
    let half = 0.5 * cfg.step_size;
    let mut z = init;
    for step in 0..cfg.steps {
        let grad = energy.gradient(&z)?;
        let omega = cfg.omega(step);
        for (v, g) in z.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            let xi = if omega > 0.0 { rng.normal() } else { 0.0 };
            *v += -half * g + omega * xi;
        }
        if !z.is_finite() {
            return Err(Error::Divergence { iteration: step + 1 });
        }
    }
    Ok(z)
}

/// `n` chains from `N(0, I)` starts; chain `i` uses stream `(seed, i)`.
pub fn langevin_chains(
    energy: &dyn EnergyFn,
    cfg: &LangevinConfig,
    dims: Dims,
    seed: u64,
    n: usize,
) -> Result<Vec<LatentGrid>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::derived(seed, i as u64);
            let init = gaussian_like(&mut rng, dims);
            langevin_sample(energy, cfg, init, &mut rng)
        })
        .collect()
}
