//! TOML run configuration.
//!
//! Unknown keys are rejected everywhere. Relative file paths are resolved
//! against the directory holding the config file. Errors name the offending
//! field path, e.g. `session.edits[1].mask`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{default_fixture, CodecConfig};
use crate::denoiser::{ComponentSpec, EditInstruction, GmmPrior};
use crate::editor::{SessionConfig, Strategy};
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::grid::{Dims, LatentGrid, Mask};
use crate::sampler::{LangevinConfig, MaskMode, NoiseScale, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::training::{Optimizer, TrainConfig, DEFAULT_EMBED, DEFAULT_HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub session: Option<SessionSpec>,
    #[serde(default)]
    pub training: Option<TrainingSpec>,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub locality: Option<LocalitySpec>,
    #[serde(default)]
    pub ebm: Option<EbmSpec>,
}

/// Mixture with constant component means over a `dims = [h, w, c]` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub components: Vec<ComponentSpec>,
    #[serde(default = "unit_dims")]
    pub dims: [usize; 3],
}

fn unit_dims() -> [usize; 3] {
    [1, 1, 1]
}

impl PriorSpec {
    pub fn build(&self) -> Result<GmmPrior> {
        let [h, w, c] = self.dims;
        let parts: Vec<_> = self.components.iter().map(|p| (p.weight, p.mean, p.scale)).collect();
        GmmPrior::constant_means(Dims::new(h, w, c)?, &parts)
    }

    pub fn gaussian(mean: f64, scale: f64) -> Self {
        Self {
            components: vec![ComponentSpec { weight: 1.0, mean, scale }],
            dims: unit_dims(),
        }
    }

    pub fn bimodal(offset: f64, scale: f64) -> Self {
        Self {
            components: vec![
                ComponentSpec { weight: 0.5, mean: offset, scale },
                ComponentSpec { weight: 0.5, mean: -offset, scale },
            ],
            dims: unit_dims(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSpec {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub bias: f64,
    /// Spread of the edit's target distribution.
    #[serde(default)]
    pub scale: f64,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub input: PathBuf,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub reuse_init: bool,
    #[serde(default)]
    pub edits: Vec<EditSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_embed")]
    pub embed: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Draws used for the held-out and Bayes-floor estimates.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
}

fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    128
}
fn default_train_steps() -> usize {
    20_000
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_embed() -> usize {
    DEFAULT_EMBED
}
fn default_held_out() -> usize {
    20_000
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            steps: default_train_steps(),
            hidden: default_hidden(),
            embed: default_embed(),
            optimizer: Optimizer::Sgd,
            held_out: default_held_out(),
        }
    }
}

impl TrainingSpec {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    /// Input image; the built-in structured fixture when absent.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default = "default_drift_steps")]
    pub steps: usize,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub target_scale: f64,
}

fn default_drift_steps() -> usize {
    16
}
fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            input: None,
            steps: default_drift_steps(),
            strategies: all_strategies(),
            target_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalitySpec {
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Latent-resolution mask; a centred square covering half of each side
    /// when absent.
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default = "default_locality_bias")]
    pub bias: f64,
    #[serde(default = "default_locality_scale")]
    pub scale: f64,
    #[serde(default = "all_modes")]
    pub modes: Vec<MaskMode>,
}

fn default_locality_bias() -> f64 {
    0.5
}
fn default_locality_scale() -> f64 {
    0.1
}
fn all_modes() -> Vec<MaskMode> {
    vec![MaskMode::Pin, MaskMode::Direction, MaskMode::Eq8Literal]
}

impl Default for LocalitySpec {
    fn default() -> Self {
        Self {
            input: None,
            mask: None,
            gain: 1.0,
            bias: default_locality_bias(),
            scale: default_locality_scale(),
            modes: all_modes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbmSpec {
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_langevin_steps")]
    pub steps: usize,
    #[serde(default)]
    pub noise_scale: Option<NoiseScale>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_gap")]
    pub max_mean_gap: f64,
    #[serde(default = "default_gap")]
    pub max_rel_var_gap: f64,
}

fn default_step_size() -> f64 {
    0.005
}
fn default_langevin_steps() -> usize {
    5000
}
fn default_chains() -> usize {
    10_000
}
fn default_gap() -> f64 {
    0.1
}

impl Default for EbmSpec {
    fn default() -> Self {
        Self {
            step_size: default_step_size(),
            steps: default_langevin_steps(),
            noise_scale: None,
            chains: default_chains(),
            max_mean_gap: default_gap(),
            max_rel_var_gap: default_gap(),
        }
    }
}

impl EbmSpec {
    pub fn langevin(&self) -> LangevinConfig {
        LangevinConfig {
            step_size: self.step_size,
            noise_scale: self.noise_scale.clone(),
            steps: self.steps,
        }
    }
}

/// A fully loaded session: image, edits and masks read from disk.
#[derive(Debug, Clone)]
pub struct LoadedSession {
    pub image: LatentGrid,
    pub edits: Vec<EditInstruction>,
    pub masks: Option<Vec<Mask>>,
    pub config: SessionConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::config(field, format!("file not found: {}", p.display())))
    }
}

fn in_field<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

impl RunConfig {
    /// Parses TOML text; relative paths stay unresolved.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.inner().to_string())
        })
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &mut self.output_dir {
            resolve(base, p);
        }
        if let Some(s) = &mut self.session {
            resolve(base, &mut s.input);
            for e in &mut s.edits {
                if let Some(m) = &mut e.mask {
                    resolve(base, m);
                }
            }
        }
        if let Some(d) = &mut self.drift {
            if let Some(p) = &mut d.input {
                resolve(base, p);
            }
        }
        if let Some(l) = &mut self.locality {
            for p in [&mut l.input, &mut l.mask].into_iter().flatten() {
                resolve(base, p);
            }
        }
    }

    /// Checks enum-free invariants and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        in_field("schedule", self.schedule.build().map(drop))?;
        in_field("codec", self.codec.validate())?;
        if let Some(p) = &self.prior {
            in_field("prior", p.build().map(drop))?;
        }
        if let Some(s) = &self.session {
            require_file("session.input", &s.input)?;
            for (i, e) in s.edits.iter().enumerate() {
                if let Some(m) = &e.mask {
                    require_file(&format!("session.edits[{i}].mask"), m)?;
                }
                if !(e.scale >= 0.0 && e.scale.is_finite()) {
                    return Err(Error::config(format!("session.edits[{i}].scale"), "must be nonnegative"));
                }
            }
        }
        if let Some(t) = &self.training {
            if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
                return Err(Error::config("training.learning_rate", "must be nonnegative"));
            }
            if t.batch_size == 0 {
                return Err(Error::config("training.batch_size", "must be at least 1"));
            }
            if t.held_out == 0 {
                return Err(Error::config("training.held_out", "must be at least 1"));
            }
        }
        if let Some(d) = &self.drift {
            if let Some(p) = &d.input {
                require_file("drift.input", p)?;
            }
            if d.steps < 2 {
                return Err(Error::config("drift.steps", "must be at least 2"));
            }
        }
        if let Some(l) = &self.locality {
            if let Some(p) = &l.input {
                require_file("locality.input", p)?;
            }
            if let Some(p) = &l.mask {
                require_file("locality.mask", p)?;
            }
        }
        if let Some(e) = &self.ebm {
            if e.chains == 0 {
                return Err(Error::config("ebm.chains", "must be at least 1"));
            }
            if !(e.step_size > 0.0 && e.step_size.is_finite()) {
                return Err(Error::config("ebm.step_size", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        in_field("schedule", self.schedule.build())
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            schedule: self.schedule()?,
            sampler: self.sampler,
            codec: self.codec,
            seed: self.seed,
        })
    }

    /// Reads the session's image, masks and edits.
    pub fn load_session(&self) -> Result<LoadedSession> {
        let spec = self
            .session
            .as_ref()
            .ok_or_else(|| Error::config("session", "missing [session] block"))?;
        let image = in_field("session.input", LatentGrid::read(&spec.input))?;
        let latent = in_field("session.input", self.codec.latent_dims(image.dims()))?;
        let mut edits = Vec::with_capacity(spec.edits.len());
        let mut masks = Vec::with_capacity(spec.edits.len());
        let any_mask = spec.edits.iter().any(|e| e.mask.is_some());
        for (i, e) in spec.edits.iter().enumerate() {
            let field = format!("session.edits[{i}]");
            let id = e.id.clone().unwrap_or_else(|| format!("edit_{:03}", i + 1));
            edits.push(in_field(&field, EditInstruction::constant(id, latent, e.gain, e.bias, e.scale))?);
            if any_mask {
                let m = match &e.mask {
                    Some(p) => in_field(&format!("{field}.mask"), Mask::read(p))?,
                    None => in_field(&field, Mask::ones(latent.h, latent.w))?,
                };
                in_field(&format!("{field}.mask"), m.ensure_matches(latent))?;
                masks.push(m);
            }
        }
        Ok(LoadedSession {
            image,
            edits,
            masks: any_mask.then_some(masks),
            config: SessionConfig {
                strategy: spec.strategy,
                schedule: self.schedule()?,
                sampler: self.sampler,
                codec: self.codec,
                seed: self.seed,
                reuse_init: spec.reuse_init,
            },
        })
    }

    pub fn drift_input(&self) -> Result<LatentGrid> {
        match self.drift.as_ref().and_then(|d| d.input.as_ref()) {
            Some(p) => in_field("drift.input", LatentGrid::read(p)),
            None => Ok(default_fixture()),
        }
    }

    pub fn locality_inputs(&self) -> Result<(LatentGrid, Mask)> {
        let spec = self.locality.clone().unwrap_or_default();
        let image = match &spec.input {
            Some(p) => in_field("locality.input", LatentGrid::read(p))?,
            None => default_fixture(),
        };
        let latent = in_field("locality.input", self.codec.latent_dims(image.dims()))?;
        let mask = match &spec.mask {
            Some(p) => in_field("locality.mask", Mask::read(p))?,
            None => centred_square(latent.h, latent.w)?,
        };
        in_field("locality.mask", mask.ensure_matches(latent))?;
        Ok((image, mask))
    }
}

/// Mask covering the middle half of each side.
pub fn centred_square(h: usize, w: usize) -> Result<Mask> {
    Mask::from_fn(h, w, |y, x| (h / 4..h - h / 4).contains(&y) && (w / 4..w - w / 4).contains(&x))
}
