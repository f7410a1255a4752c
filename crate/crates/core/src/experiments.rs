//! Seeded experiments: drift under repeated identity edits, locality of
//! masked edits, and Langevin vs. reverse-diffusion moment agreement.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, CodecConfig};
use crate::denoiser::{ConditionalDenoiser, Denoiser, EditInstruction, GmmDenoiser, GmmPrior};
use crate::editor::{open_session, SessionConfig, Strategy};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Mask, RngStream};
use crate::sampler::{langevin_chains, sample, sample_many, LangevinConfig, MaskGuide, MaskMode, MixtureEnergy, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Settings shared by the drift and locality experiments.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub codec: CodecConfig,
    pub seed: u64,
}

/// A report row with a fixed CSV schema.
pub trait ReportRow: Serialize {
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes `rows` as CSV (header always present) or as a JSON array.
pub fn write_report<R: ReportRow>(rows: &[R], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut bytes);
            w.write_record(R::HEADER)?;
            for r in rows {
                w.write_record(r.record())?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut bytes, rows)?;
            bytes.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Drift

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub strategy: Strategy,
    pub step: usize,
    /// Latent RMSE against the encoded original.
    pub rmse_vs_origin: f64,
    /// Latent RMSE against the previous step (the encoded original at step 1).
    pub rmse_vs_prev: f64,
    pub latent_mean: f64,
    pub latent_std: f64,
    /// Image-space RMSE against the original image.
    pub image_rmse_vs_origin: f64,
}

impl ReportRow for DriftRow {
    const HEADER: &'static [&'static str] =
        &["strategy", "step", "rmse_vs_origin", "rmse_vs_prev", "latent_mean", "latent_std"];

    fn record(&self) -> Vec<String> {
        vec![
            self.strategy.to_string(),
            self.step.to_string(),
            num(self.rmse_vs_origin),
            num(self.rmse_vs_prev),
            num(self.latent_mean),
            num(self.latent_std),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
}

impl DriftReport {
    pub fn series(&self, strategy: Strategy) -> Vec<&DriftRow> {
        self.rows.iter().filter(|r| r.strategy == strategy).collect()
    }

    /// `rmse_vs_origin` per step for one strategy.
    pub fn curve(&self, strategy: Strategy) -> Vec<f64> {
        self.series(strategy).iter().map(|r| r.rmse_vs_origin).collect()
    }
}

/// One session of `steps` identity edits per strategy, all from the same seed.
/// Strategies run in parallel; rows come back in the order given.
pub fn drift_experiment(
    fixture: &LatentGrid,
    strategies: &[Strategy],
    steps: usize,
    target_scale: f64,
    cfg: &ExperimentConfig,
) -> Result<DriftReport> {
    if steps < 2 {
        return Err(Error::InvalidRange(format!("drift needs at least 2 steps, got {steps}")));
    }
    let latent_dims = cfg.codec.latent_dims(fixture.dims())?;
    let origin = encode(fixture, &cfg.codec)?;
    let identity = EditInstruction::identity(latent_dims, target_scale)?;
    let per_strategy: Vec<Result<Vec<DriftRow>>> = strategies
        .par_iter()
        .map(|&strategy| {
            let session_cfg = SessionConfig {
                strategy,
                schedule: cfg.schedule.clone(),
                sampler: cfg.sampler,
                codec: cfg.codec,
                seed: cfg.seed,
                reuse_init: false,
            };
            let mut session = open_session(fixture.clone(), vec![identity.clone(); steps], None, session_cfg)?;
            session.run_all()?;
            let mut prev = &origin;
            let mut rows = Vec::with_capacity(steps);
            for (i, (z, image)) in session.output_latents().iter().zip(session.outputs()).enumerate() {
                rows.push(DriftRow {
                    strategy,
                    step: i + 1,
                    rmse_vs_origin: z.rmse(&origin)?,
                    rmse_vs_prev: z.rmse(prev)?,
                    latent_mean: z.mean(),
                    latent_std: z.std(),
                    image_rmse_vs_origin: image.rmse(fixture)?,
                });
                prev = z;
            }
            Ok(rows)
        })
        .collect();
    let mut report = DriftReport::default();
    for rows in per_strategy {
        report.rows.extend(rows?);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Locality

/// A masking mode, or the unmasked control run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityMode {
    Masked(MaskMode),
    Unmasked,
}

impl LocalityMode {
    pub fn name(self) -> &'static str {
        match self {
            LocalityMode::Masked(MaskMode::Pin) => "pin",
            LocalityMode::Masked(MaskMode::Direction) => "direction",
            LocalityMode::Masked(MaskMode::Eq8Literal) => "eq8_literal",
            LocalityMode::Unmasked => "unmasked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityRow {
    pub mode: String,
    pub inside_rms: f64,
    pub outside_rms: f64,
    /// `outside / inside`; absent when nothing changed inside.
    pub ratio: Option<f64>,
}

impl ReportRow for LocalityRow {
    const HEADER: &'static [&'static str] = &["mode", "inside_rms", "outside_rms", "ratio"];

    fn record(&self) -> Vec<String> {
        vec![
            self.mode.clone(),
            num(self.inside_rms),
            num(self.outside_rms),
            self.ratio.map(num).unwrap_or_default(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalityReport {
    pub rows: Vec<LocalityRow>,
}

impl LocalityReport {
    pub fn row(&self, mode: &str) -> Option<&LocalityRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// RMS of `after - before` inside and outside the mask.
pub fn region_rms(before: &LatentGrid, after: &LatentGrid, mask: &Mask) -> Result<(f64, f64)> {
    before.ensure_same_dims(after)?;
    mask.ensure_matches(before.dims())?;
    let c = before.channels();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (i, (a, b)) in before.as_slice().iter().zip(after.as_slice()).enumerate() {
        let d = (b - a) * (b - a);
        if mask.at_element(i, c) {
            si += d;
            ni += 1;
        } else {
            so += d;
            no += 1;
        }
    }
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    Ok((rms(si, ni), rms(so, no)))
}

/// Runs a single edit of `source` under `mode`, from the experiment seed.
pub fn run_single_edit(
    source: &LatentGrid,
    edit: &EditInstruction,
    mask: &Mask,
    mode: LocalityMode,
    cfg: &ExperimentConfig,
) -> Result<LatentGrid> {
    let denoiser = ConditionalDenoiser::new(edit, source)?;
    let recon = ConditionalDenoiser::new(&EditInstruction::identity(source.dims(), edit.target_scale)?, source)?;
    let mut rng = RngStream::new(cfg.seed);
    match mode {
        LocalityMode::Unmasked => sample(&denoiser, source.dims(), &cfg.schedule, &cfg.sampler, &mut rng, None),
        LocalityMode::Masked(mask_mode) => {
            let sampler = SamplerConfig { mask_mode, ..cfg.sampler };
            let guide = MaskGuide {
                mask,
                z_src: Some(source),
                recon: Some(&recon as &dyn Denoiser),
            };
            sample(&denoiser, source.dims(), &cfg.schedule, &sampler, &mut rng, Some(guide))
        }
    }
}

/// One edit of the encoded fixture per mode plus the unmasked control,
/// measured against the source latent.
pub fn locality_experiment(
    fixture: &LatentGrid,
    edit: &EditInstruction,
    mask: &Mask,
    modes: &[MaskMode],
    cfg: &ExperimentConfig,
) -> Result<LocalityReport> {
    let source = encode(fixture, &cfg.codec)?;
    mask.ensure_matches(source.dims())?;
    let runs: Vec<LocalityMode> = modes
        .iter()
        .map(|&m| LocalityMode::Masked(m))
        .chain(std::iter::once(LocalityMode::Unmasked))
        .collect();
    let rows: Vec<Result<LocalityRow>> = runs
        .par_iter()
        .map(|&mode| {
            let out = run_single_edit(&source, edit, mask, mode, cfg)?;
            let (inside, outside) = region_rms(&source, &out, mask)?;
            Ok(LocalityRow {
                mode: mode.name().to_string(),
                inside_rms: inside,
                outside_rms: outside,
                ratio: (inside > 0.0).then(|| outside / inside),
            })
        })
        .collect();
    Ok(LocalityReport { rows: rows.into_iter().collect::<Result<_>>()? })
}

// ---------------------------------------------------------------------------
// Langevin vs. diffusion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbmRow {
    pub prior: String,
    pub dim: usize,
    pub diffusion_mean: f64,
    pub langevin_mean: f64,
    pub diffusion_var: f64,
    pub langevin_var: f64,
    pub mean_gap: f64,
    /// `|var_langevin - var_diffusion| / var_diffusion`.
    pub rel_var_gap: f64,
}

impl ReportRow for EbmRow {
    const HEADER: &'static [&'static str] = &[
        "prior",
        "dim",
        "diffusion_mean",
        "langevin_mean",
        "diffusion_var",
        "langevin_var",
        "mean_gap",
        "rel_var_gap",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.prior.clone(),
            self.dim.to_string(),
            num(self.diffusion_mean),
            num(self.langevin_mean),
            num(self.diffusion_var),
            num(self.langevin_var),
            num(self.mean_gap),
            num(self.rel_var_gap),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EbmReport {
    pub rows: Vec<EbmRow>,
}

impl EbmReport {
    pub fn passes(&self, max_mean_gap: f64, max_rel_var_gap: f64) -> bool {
        !self.rows.is_empty()
            && self
                .rows
                .iter()
                .all(|r| r.mean_gap <= max_mean_gap && r.rel_var_gap <= max_rel_var_gap)
    }
}

/// Mean and population variance of coordinate `i` across samples.
pub fn coordinate_moments(samples: &[LatentGrid], i: usize) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.as_slice()[i]).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.as_slice()[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Offset that separates the Langevin chain streams from the diffusion ones.
const LANGEVIN_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// `n` diffusion samples with the exact mixture denoiser and `n` Langevin
/// chains on the exact mixture energy; per-coordinate moment gaps. Rows are
/// tagged with `label`.
pub fn ebm_equivalence_experiment(
    label: &str,
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    langevin: &LangevinConfig,
    n: usize,
    seed: u64,
) -> Result<EbmReport> {
    if n == 0 {
        return Err(Error::InvalidRange("need at least one chain".into()));
    }
    let dims = prior.dims();
    let denoiser = GmmDenoiser { prior };
    let energy = MixtureEnergy::new(prior)?;
    let diffusion = sample_many(&denoiser, dims, sched, sampler, seed, n)?;
    let chains = langevin_chains(&energy, langevin, dims, seed ^ LANGEVIN_STREAM_SALT, n)?;
    let rows = (0..dims.len())
        .map(|i| {
            let (dm, dv) = coordinate_moments(&diffusion, i);
            let (lm, lv) = coordinate_moments(&chains, i);
            EbmRow {
                prior: label.to_string(),
                dim: i,
                diffusion_mean: dm,
                langevin_mean: lm,
                diffusion_var: dv,
                langevin_var: lv,
                mean_gap: (lm - dm).abs(),
                rel_var_gap: (lv - dv).abs() / dv,
            }
        })
        .collect();
    Ok(EbmReport { rows })
}
