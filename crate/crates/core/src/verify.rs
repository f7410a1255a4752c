//! Self-check suite: schedule invariants, score consistency, gradient checks,
//! sampler moments, masking guarantees and forward-process consistency.

use serde::Serialize;

use crate::codec::{default_fixture, encode, CodecConfig};
use crate::denoiser::{gmm_eps, ConditionalDenoiser, Denoiser, EditInstruction, GmmDenoiser, GmmPrior};
use crate::error::Result;
use crate::grid::{gaussian_grid, Dims, LatentGrid, Mask, RngStream};
use crate::sampler::{
    forward_step, masked_reverse_step, noise_to, reverse_step, sample_many, MaskInputs, MaskMode,
    ReverseMethod, SamplerConfig,
};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::training::{draw_batch, loss, loss_and_grad, TinyDenoiser};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Debug hooks that deliberately break one input, to prove the suite can fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Overwrite one beta of the checked schedule with a value above 1.
    pub corrupt_schedule: bool,
}

/// Floor on the denominator of [`gradient_error`]: below it the 1e-4
/// threshold becomes an absolute error of 1e-9.
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRADIENT_SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Worst gradient error over every parameter, central differences with step `h`.
pub fn max_gradient_error(model: &TinyDenoiser, seed: u64, batch: usize, sched: &NoiseSchedule, h: f64) -> Result<f64> {
    let dims = Dims::new(1, model.dim(), 1)?;
    let prior = GmmPrior::constant_means(dims, &[(0.5, 1.5, 0.5), (0.5, -1.0, 0.3)])?;
    let mut rng = RngStream::new(seed);
    let items = draw_batch(&prior, sched, batch, &mut rng);
    let (_, grads) = loss_and_grad(model, &items, sched)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (k, (_, g)) in grads.slices().iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let orig = probe.params().slices()[k].1[i];
            probe.params_mut().slices_mut()[k].1[i] = orig + h;
            let up = loss(&probe, &items, sched)?;
            probe.params_mut().slices_mut()[k].1[i] = orig - h;
            let down = loss(&probe, &items, sched)?;
            probe.params_mut().slices_mut()[k].1[i] = orig;
            worst = worst.max(gradient_error(analytic, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn schedule_check(inject: FaultInjection) -> Result<(bool, String)> {
    let mut sched = NoiseSchedule::build(ScheduleKind::Linear, 200, 1e-4, 0.02)?;
    let cosine = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 1e-4, 0.02)?;
    if inject.corrupt_schedule {
        sched.corrupt_beta_for_testing(100, 1.5);
    }
    match (sched.validate(), cosine.validate()) {
        (Ok(()), Ok(())) => Ok((true, "linear T=200 and cosine T=1000 tables consistent".into())),
        (Err(e), _) | (_, Err(e)) => Ok((false, e)),
    }
}

fn score_check() -> Result<(bool, String)> {
    let prior = GmmPrior::constant_means(Dims::new(1, 2, 1)?, &[(0.3, 1.0, 0.5), (0.7, -2.0, 0.2)])?;
    let mut rng = RngStream::new(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &ab in &[0.05, 0.5, 0.99] {
        for _ in 0..10 {
            let z = gaussian_grid(&mut rng, 1, 2, 1)?.scale(2.0);
            let score = prior.score(&z, ab)?;
            for i in 0..z.len() {
                let mut up = z.clone();
                up.as_mut_slice()[i] += h;
                let mut down = z.clone();
                down.as_mut_slice()[i] -= h;
                let fd = (prior.log_density(&up, ab)? - prior.log_density(&down, ab)?) / (2.0 * h);
                worst = worst.max((fd - score.as_slice()[i]).abs() / (1.0 + fd.abs()));
            }
        }
    }
    Ok((worst < 1e-6, format!("max score error {worst:.2e}")))
}

fn conditional_check() -> Result<(bool, String)> {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.02)?;
    let mut rng = RngStream::new(12);
    let src = gaussian_grid(&mut rng, 3, 3, 2)?;
    let edit = EditInstruction::constant("e", src.dims(), 0.5, 0.25, 0.0)?;
    let den = ConditionalDenoiser::new(&edit, &src)?;
    let mut worst: f64 = 0.0;
    for t in [1, 10, 50] {
        let eps = gaussian_grid(&mut rng, 3, 3, 2)?;
        let z_t = noise_to(den.target(), t, &eps, &sched)?;
        worst = worst.max(den.predict(&z_t, t, &sched)?.rmse(&eps)?);
    }
    Ok((worst < 1e-9, format!("point-mass edit recovers noise, rmse {worst:.2e}")))
}

fn gradient_check() -> Result<(bool, String)> {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.02)?;
    let mut worst: f64 = 0.0;
    for (i, d) in [1usize, 4, 16].into_iter().enumerate() {
        let model = TinyDenoiser::init(d, 16, 8, 50, 100 + i as u64)?;
        worst = worst.max(max_gradient_error(&model, 200 + i as u64, 4, &sched, 1e-5)?);
    }
    Ok((worst < 1e-4, format!("max relative gradient error {worst:.2e}")))
}

fn moments_check() -> Result<(bool, String)> {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 200, 1e-4, 0.02)?;
    let prior = GmmPrior::constant_means(Dims::new(1, 1, 1)?, &[(1.0, 0.0, 1.0)])?;
    let n = 4000;
    let samples = sample_many(&GmmDenoiser { prior: &prior }, prior.dims(), &sched, &SamplerConfig::default(), 13, n)?;
    let mean = samples.iter().map(|s| s.as_slice()[0]).sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s.as_slice()[0] - mean).powi(2)).sum::<f64>() / n as f64;
    // five standard errors
    let ok = mean.abs() < 5.0 / (n as f64).sqrt() && (var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt();
    Ok((ok, format!("N(0,1) prior: mean {mean:.4}, var {var:.4} over {n} samples")))
}

fn masking_check() -> Result<(bool, String)> {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 20, 1e-4, 0.02)?;
    let mut rng = RngStream::new(14);
    let z = gaussian_grid(&mut rng, 4, 4, 2)?;
    let eps = gaussian_grid(&mut rng, 4, 4, 2)?;
    let src = gaussian_grid(&mut rng, 4, 4, 2)?;
    let ones = Mask::ones(4, 4)?;
    let mut identical = true;
    for method in [ReverseMethod::DdpmFull, ReverseMethod::DdpmLiteral, ReverseMethod::EulerAncestral] {
        for mode in [MaskMode::Eq8Literal, MaskMode::Pin, MaskMode::Direction] {
            let cfg = SamplerConfig { method, mask_mode: mode, add_final_noise: false };
            let mut a = RngStream::new(15);
            let mut b = RngStream::new(15);
            let plain = reverse_step(&z, 7, &eps, &sched, &cfg, &mut a)?;
            let inputs = MaskInputs { z_src: Some(&src), eps_recon: Some(&src) };
            let masked = masked_reverse_step(&z, 7, &eps, &ones, inputs, &sched, &cfg, &mut b)?;
            identical &= plain == masked;
        }
    }
    let half = Mask::from_fn(4, 4, |y, _| y < 2)?;
    let cfg = SamplerConfig::default();
    let inputs = MaskInputs { z_src: Some(&src), eps_recon: None };
    let out = masked_reverse_step(&z, 1, &eps, &half, inputs, &sched, &cfg, &mut rng)?;
    let mut frozen = true;
    for y in 2..4 {
        for x in 0..4 {
            for c in 0..2 {
                frozen &= out.get(y, x, c) == src.get(y, x, c);
            }
        }
    }
    Ok((identical && frozen, format!("all-ones identical: {identical}; pin frozen region exact: {frozen}")))
}

fn forward_check() -> Result<(bool, String)> {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.02)?;
    let z0 = LatentGrid::filled(1, 1, 1, 2.0)?;
    let n = 5000;
    let mut rng = RngStream::new(16);
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = z0.clone();
        for t in 1..=50 {
            z = forward_step(&z, t, &sched, &mut rng)?;
        }
        vals.push(z.as_slice()[0]);
    }
    let ab = sched.query(50)?.alpha_bar;
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let (m_exp, v_exp) = (ab.sqrt() * 2.0, 1.0 - ab);
    let ok = (mean - m_exp).abs() < 5.0 * (v_exp / n as f64).sqrt() && (var / v_exp - 1.0).abs() < 0.1;
    Ok((ok, format!("mean {mean:.4} vs {m_exp:.4}, var {var:.4} vs {v_exp:.4}")))
}

fn codec_check() -> Result<(bool, String)> {
    let cfg = CodecConfig::default();
    let z = encode(&default_fixture(), &cfg)?;
    let on = z.as_slice().iter().all(|&v| cfg.on_lattice(v));
    Ok((on, format!("{} latent values on the quantization lattice: {on}", z.len())))
}

fn bayes_check() -> Result<(bool, String)> {
    // exact mixture denoiser is never worse than predicting zero noise
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.02)?;
    let prior = GmmPrior::constant_means(Dims::new(1, 1, 1)?, &[(0.5, 2.0, 0.25), (0.5, -2.0, 0.25)])?;
    let mut rng = RngStream::new(17);
    let mut ours = 0.0;
    let mut zero = 0.0;
    for _ in 0..2000 {
        let (z0, t, eps) = crate::denoiser::draw_objective_sample(&prior, &sched, &mut rng);
        let z_t = noise_to(&z0, t, &eps, &sched)?;
        ours += gmm_eps(&z_t, t, &prior, &sched)?.rmse(&eps)?.powi(2);
        zero += eps.as_slice()[0].powi(2);
    }
    Ok((ours < zero, format!("mixture denoiser loss {:.4} vs zero predictor {:.4}", ours / 2000.0, zero / 2000.0)))
}

/// Runs every check in a fixed order.
pub fn run_checks(inject: FaultInjection) -> Vec<CheckResult> {
    vec![
        CheckResult::from_result("schedule_invariants", schedule_check(inject)),
        CheckResult::from_result("score_consistency", score_check()),
        CheckResult::from_result("conditional_inversion", conditional_check()),
        CheckResult::from_result("gradient_check", gradient_check()),
        CheckResult::from_result("sampler_moments", moments_check()),
        CheckResult::from_result("masking_guarantees", masking_check()),
        CheckResult::from_result("forward_consistency", forward_check()),
        CheckResult::from_result("codec_lattice", codec_check()),
        CheckResult::from_result("bayes_denoiser", bayes_check()),
    ]
}
