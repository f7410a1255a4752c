//! Multi-step editing sessions. Each edit is a full reverse diffusion run
//! conditioned on a source latent; strategies differ in where that source
//! latent comes from between edits.

use serde::{Deserialize, Serialize};

use crate::codec::{binomial_blur, decode, encode, Codec, CodecConfig};
use crate::denoiser::{ConditionalDenoiser, EditInstruction};
use crate::error::{Error, Result};
use crate::grid::{gaussian_like, mean_stat, Dims, LatentGrid, Mask, RngStream};
use crate::sampler::{sample_from, MaskGuide, MaskMode, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Below this magnitude the latent mean is treated as zero and no scaling
/// is applied.
pub const RENORM_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Feed the previous output latent (renormalized) into the next edit.
    #[default]
    LatentIteration,
    /// Re-encode the previous output image.
    ImageIteration,
    /// Always start from the original, conditioned on all edits so far.
    ConcatInstructions,
    /// Like image iteration, with a blur pass before re-encoding.
    BlurBaseline,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::LatentIteration,
        Strategy::ImageIteration,
        Strategy::ConcatInstructions,
        Strategy::BlurBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LatentIteration => "latent_iteration",
            Strategy::ImageIteration => "image_iteration",
            Strategy::ConcatInstructions => "concat_instructions",
            Strategy::BlurBaseline => "blur_baseline",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidRange(format!("unknown strategy '{s}'")))
    }
}

/// `z * f` with `f = mean(encode(decode(z))) / mean(z)`; returns the scaled
/// latent and `f`. The round trip only produces the scalar.
pub fn renormalize_latent(z: &LatentGrid, cfg: &CodecConfig) -> Result<(LatentGrid, f64)> {
    let reference = mean_stat(&encode(&decode(z, cfg)?, cfg)?);
    Ok(renormalize_with_reference(z, reference))
}

/// Same rule with the reference mean supplied directly.
pub fn renormalize_with_reference(z: &LatentGrid, reference: f64) -> (LatentGrid, f64) {
    let d = mean_stat(z);
    if d.abs() < RENORM_GUARD {
        return (z.clone(), 1.0);
    }
    let f = reference / d;
    (z.scale(f), f)
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub strategy: Strategy,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub codec: CodecConfig,
    pub seed: u64,
    /// Draw the starting noise once and reuse it for every edit.
    pub reuse_init: bool,
}

/// Per-edit bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditRecord {
    pub index: usize,
    pub edit_id: String,
    /// Renormalization factor applied to the source latent; 1 when none was.
    pub factor: f64,
    pub masked: bool,
    pub source_mean: f64,
    pub latent_mean: f64,
    pub latent_std: f64,
}

#[derive(Debug)]
pub struct EditSession {
    original: LatentGrid,
    edits: Vec<EditInstruction>,
    masks: Option<Vec<Mask>>,
    cfg: SessionConfig,
    codec: Codec,
    rng: RngStream,
    latent_dims: Dims,
    /// Lazily encoded original, shared by every strategy's first edit.
    origin_latent: Option<LatentGrid>,
    prev_latent: Option<LatentGrid>,
    init: Option<LatentGrid>,
    outputs: Vec<LatentGrid>,
    output_latents: Vec<LatentGrid>,
    records: Vec<EditRecord>,
    renorm_roundtrips: usize,
}

pub fn open_session(
    original: LatentGrid,
    edits: Vec<EditInstruction>,
    masks: Option<Vec<Mask>>,
    cfg: SessionConfig,
) -> Result<EditSession> {
    let codec = Codec::new(cfg.codec)?;
    let latent_dims = cfg.codec.latent_dims(original.dims())?;
    if !original.is_finite() {
        return Err(Error::InvalidRange("original image has non-finite values".into()));
    }
    for e in &edits {
        if e.dims() != latent_dims {
            return Err(Error::dims(latent_dims, format!("edit '{}' of {}", e.id, e.dims())));
        }
    }
    if let Some(ms) = &masks {
        if ms.len() != edits.len() {
            return Err(Error::dims(
                format!("{} masks", edits.len()),
                format!("{} masks", ms.len()),
            ));
        }
        for m in ms {
            m.ensure_matches(latent_dims)?;
        }
    }
    cfg.schedule.validate().map_err(Error::InvalidRange)?;
    let rng = RngStream::new(cfg.seed);
    Ok(EditSession {
        original,
        edits,
        masks,
        cfg,
        codec,
        rng,
        latent_dims,
        origin_latent: None,
        prev_latent: None,
        init: None,
        outputs: Vec::new(),
        output_latents: Vec::new(),
        records: Vec::new(),
        renorm_roundtrips: 0,
    })
}

impl EditSession {
    pub fn edits_done(&self) -> usize {
        self.outputs.len()
    }

    pub fn remaining(&self) -> usize {
        self.edits.len() - self.outputs.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.cfg.strategy
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn original(&self) -> &LatentGrid {
        &self.original
    }

    pub fn latent_dims(&self) -> Dims {
        self.latent_dims
    }

    pub fn prev_latent(&self) -> Option<&LatentGrid> {
        self.prev_latent.as_ref()
    }

    pub fn outputs(&self) -> &[LatentGrid] {
        &self.outputs
    }

    pub fn output_latents(&self) -> &[LatentGrid] {
        &self.output_latents
    }

    pub fn records(&self) -> &[EditRecord] {
        &self.records
    }

    /// Encoder calls on the editing path. Renormalization round trips are
    /// counted separately.
    pub fn encode_calls(&self) -> usize {
        self.codec.encode_calls()
    }

    pub fn renorm_roundtrips(&self) -> usize {
        self.renorm_roundtrips
    }

    /// Encoded original image; encodes on first use.
    pub fn origin_latent(&mut self) -> Result<LatentGrid> {
        if self.origin_latent.is_none() {
            self.origin_latent = Some(self.codec.encode(&self.original)?);
        }
        Ok(self.origin_latent.clone().expect("set above"))
    }

    fn source_latent(&mut self) -> Result<(LatentGrid, f64)> {
        let e = self.edits_done();
        if e == 0 {
            return Ok((self.origin_latent()?, 1.0));
        }
        let last = self.outputs.last().expect("e >= 1");
        match self.cfg.strategy {
            Strategy::LatentIteration => {
                let prev = self.prev_latent.as_ref().expect("set after each edit");
                self.renorm_roundtrips += 1;
                renormalize_latent(prev, &self.cfg.codec)
            }
            Strategy::ImageIteration => Ok((self.codec.encode(last)?, 1.0)),
            Strategy::BlurBaseline => {
                let blurred = binomial_blur(last);
                Ok((self.codec.encode(&blurred)?, 1.0))
            }
            Strategy::ConcatInstructions => Ok((self.origin_latent()?, 1.0)),
        }
    }

    fn condition(&self) -> Result<EditInstruction> {
        let e = self.edits_done();
        match self.cfg.strategy {
            Strategy::ConcatInstructions => EditInstruction::compose(&self.edits[..=e]),
            _ => Ok(self.edits[e].clone()),
        }
    }

    /// Runs the next edit and returns its output image.
    pub fn apply_edit(&mut self) -> Result<LatentGrid> {
        let e = self.edits_done();
        if e >= self.edits.len() {
            return Err(Error::SessionExhausted(self.edits.len()));
        }
        let (z_img, factor) = self.source_latent()?;
        let edit = self.condition()?;
        let denoiser = ConditionalDenoiser::new(&edit, &z_img)?;

        let init = match (&self.init, self.cfg.reuse_init) {
            (Some(z), true) => z.clone(),
            _ => {
                let z = gaussian_like(&mut self.rng, self.latent_dims);
                if self.cfg.reuse_init {
                    self.init = Some(z.clone());
                }
                z
            }
        };

        let mask = self.masks.as_ref().map(|ms| ms[e].clone());
        let recon = match (&mask, self.cfg.sampler.mask_mode) {
            (Some(_), MaskMode::Direction) => Some(ConditionalDenoiser::new(
                &EditInstruction::identity(self.latent_dims, edit.target_scale)?,
                &z_img,
            )?),
            _ => None,
        };
        let guide = mask.as_ref().map(|m| MaskGuide {
            mask: m,
            z_src: Some(&z_img),
            recon: recon.as_ref().map(|r| r as &dyn crate::denoiser::Denoiser),
        });
        let z0 = sample_from(init, &denoiser, &self.cfg.schedule, &self.cfg.sampler, &mut self.rng, guide)?;
        let image = self.codec.decode(&z0)?;

        self.records.push(EditRecord {
            index: e + 1,
            edit_id: self.edits[e].id.clone(),
            factor,
            masked: mask.as_ref().is_some_and(|m| !m.is_all_ones()),
            source_mean: mean_stat(&z_img),
            latent_mean: z0.mean(),
            latent_std: z0.std(),
        });
        if self.cfg.strategy == Strategy::LatentIteration {
            self.prev_latent = Some(z0.clone());
        }
        self.output_latents.push(z0);
        self.outputs.push(image.clone());
        Ok(image)
    }

    /// Applies every remaining edit in order.
    pub fn run_all(&mut self) -> Result<&[LatentGrid]> {
        while self.remaining() > 0 {
            self.apply_edit()?;
        }
        Ok(&self.outputs)
    }
}
