//! A one-hidden-layer tanh noise predictor trained on the denoising objective
//! `E |eps - eps_theta(z_t, t)|^2`, with hand-written gradients.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{draw_objective_sample, Denoiser, GmmPrior};
use crate::error::{Error, Result};
use crate::grid::{LatentGrid, RngStream, Tokens};
use crate::sampler::noise_to;
use crate::schedule::NoiseSchedule;

pub const MAX_INPUT_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_EMBED: usize = 8;

/// Parameter tensors, also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `hidden x (dim + embed)`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `dim x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    fn zeros_like(other: &Params) -> Self {
        Self {
            w1: vec![0.0; other.w1.len()],
            b1: vec![0.0; other.b1.len()],
            w2: vec![0.0; other.w2.len()],
            b2: vec![0.0; other.b2.len()],
        }
    }

    pub fn slices(&self) -> [(&'static str, &[f64]); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn slices_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    dim: usize,
    hidden: usize,
    embed: usize,
    steps: usize,
    params: Params,
    /// `T x embed` sinusoidal table, row `t - 1` for timestep `t`.
    time_embedding: Vec<f64>,
}

fn sinusoidal_table(steps: usize, embed: usize) -> Vec<f64> {
    let mut table = vec![0.0; steps * embed];
    for t in 1..=steps {
        for i in 0..embed {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / embed as f64);
            let arg = t as f64 * freq;
            table[(t - 1) * embed + i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
        }
    }
    table
}

impl TinyDenoiser {
    /// All-zero parameters.
    pub fn zeros(dim: usize, hidden: usize, embed: usize, steps: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_INPUT_DIM {
            return Err(Error::InvalidRange(format!(
                "input dim {dim} must lie in 1..={MAX_INPUT_DIM}"
            )));
        }
        if hidden == 0 || steps == 0 {
            return Err(Error::InvalidRange("hidden width and T must be positive".into()));
        }
        let input = dim + embed;
        Ok(Self {
            dim,
            hidden,
            embed,
            steps,
            params: Params {
                w1: vec![0.0; hidden * input],
                b1: vec![0.0; hidden],
                w2: vec![0.0; dim * hidden],
                b2: vec![0.0; dim],
            },
            time_embedding: sinusoidal_table(steps, embed),
        })
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(dim: usize, hidden: usize, embed: usize, steps: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dim, hidden, embed, steps)?;
        let mut rng = RngStream::new(seed);
        let s1 = 1.0 / ((dim + embed) as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        for w in &mut model.params.w1 {
            *w = s1 * rng.normal();
        }
        for w in &mut model.params.w2 {
            *w = s2 * rng.normal();
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn embed(&self) -> usize {
        self.embed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn input_width(&self) -> usize {
        self.dim + self.embed
    }

    fn embedding(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(&self.time_embedding[(t - 1) * self.embed..t * self.embed])
    }

    /// Writes the input vector and hidden activations; returns the output.
    fn forward_into(&self, z: &[f64], t: usize, x: &mut Vec<f64>, h: &mut Vec<f64>, out: &mut Vec<f64>) -> Result<()> {
        x.clear();
        x.extend_from_slice(z);
        x.extend_from_slice(self.embedding(t)?);
        let n_in = self.input_width();
        h.clear();
        for j in 0..self.hidden {
            let row = &self.params.w1[j * n_in..(j + 1) * n_in];
            let a: f64 = row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + self.params.b1[j];
            h.push(a.tanh());
        }
        out.clear();
        for i in 0..self.dim {
            let row = &self.params.w2[i * self.hidden..(i + 1) * self.hidden];
            out.push(row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>() + self.params.b2[i]);
        }
        Ok(())
    }

    pub fn forward(&self, z_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
        if z_t.len() != self.dim {
            return Err(Error::dims(format!("{} inputs", self.dim), format!("{} inputs", z_t.len())));
        }
        let (mut x, mut h, mut out) = (Vec::new(), Vec::new(), Vec::new());
        self.forward_into(z_t.as_slice(), t, &mut x, &mut h, &mut out)?;
        LatentGrid::new(z_t.height(), z_t.width(), z_t.channels(), out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n_in = self.input_width();
        let blocks: [(&str, &[f64], usize, usize); 5] = [
            ("w1", &self.params.w1, self.hidden, n_in),
            ("b1", &self.params.b1, self.hidden, 1),
            ("w2", &self.params.w2, self.dim, self.hidden),
            ("b2", &self.params.b2, self.dim, 1),
            ("time_embedding", &self.time_embedding, self.steps(), self.embed),
        ];
        for (name, data, rows, cols) in blocks {
            let g = LatentGrid::new(rows, cols, 1, data.to_vec()).expect("finite parameters");
            let _ = writeln!(s, "PARAM {name}");
            s.push_str(&g.to_string());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Tokens::new(text);
        let mut blocks = std::collections::BTreeMap::new();
        while !tokens.is_done() {
            tokens.keyword("PARAM")?;
            let name = tokens.word("parameter name")?.to_string();
            let grid = tokens.grid()?;
            blocks.insert(name, grid);
        }
        let take = |name: &str| {
            blocks.get(name).cloned().ok_or_else(|| Error::Parse {
                line: 0,
                position: 0,
                message: format!("missing PARAM {name}"),
            })
        };
        let w1 = take("w1")?;
        let b1 = take("b1")?;
        let w2 = take("w2")?;
        let b2 = take("b2")?;
        let emb = take("time_embedding")?;
        let hidden = w1.height();
        let dim = w2.height();
        let embed = emb.width();
        let steps = emb.height();
        let mut model = Self::zeros(dim, hidden, embed, steps)?;
        if w1.width() != dim + embed || b1.height() != hidden || w2.width() != hidden || b2.height() != dim {
            return Err(Error::dims("consistent parameter shapes", "mismatched PARAM blocks"));
        }
        model.params = Params {
            w1: w1.into_vec(),
            b1: b1.into_vec(),
            w2: w2.into_vec(),
            b2: b2.into_vec(),
        };
        model.time_embedding = emb.into_vec();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, z_t: &LatentGrid, t: usize, _sched: &NoiseSchedule) -> Result<LatentGrid> {
        self.forward(z_t, t)
    }
}

/// One element of a training batch: clean sample, timestep, noise.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub z0: LatentGrid,
    pub t: usize,
    pub eps: LatentGrid,
}

/// Mean over the batch of `|eps - eps_theta(z_t, t)|^2 / dim`, and its exact
/// gradient with respect to every parameter.
pub fn loss_and_grad(model: &TinyDenoiser, batch: &[BatchItem], sched: &NoiseSchedule) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::InvalidRange("empty batch".into()));
    }
    let mut grads = Params::zeros_like(&model.params);
    let norm = 1.0 / (batch.len() * model.dim) as f64;
    let n_in = model.input_width();
    let (mut x, mut h, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut dout = vec![0.0; model.dim];
    let mut dh = vec![0.0; model.hidden];
    let mut loss = 0.0;
    for item in batch {
        if item.z0.len() != model.dim || item.eps.len() != model.dim {
            return Err(Error::dims(format!("{} inputs", model.dim), format!("{} inputs", item.z0.len())));
        }
        let z_t = noise_to(&item.z0, item.t, &item.eps, sched)?;
        model.forward_into(z_t.as_slice(), item.t, &mut x, &mut h, &mut out)?;
        for i in 0..model.dim {
            let r = out[i] - item.eps.as_slice()[i];
            loss += r * r * norm;
            dout[i] = 2.0 * r * norm;
        }
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (i, &g) in dout.iter().enumerate().take(model.dim) {
            grads.b2[i] += g;
            let row = i * model.hidden;
            for j in 0..model.hidden {
                grads.w2[row + j] += g * h[j];
                dh[j] += g * model.params.w2[row + j];
            }
        }
        for j in 0..model.hidden {
            let da = dh[j] * (1.0 - h[j] * h[j]);
            grads.b1[j] += da;
            let row = &mut grads.w1[j * n_in..(j + 1) * n_in];
            for (g, xi) in row.iter_mut().zip(&x) {
                *g += da * xi;
            }
        }
    }
    Ok((loss, grads))
}

/// Loss only; used by finite-difference checks.
pub fn loss(model: &TinyDenoiser, batch: &[BatchItem], sched: &NoiseSchedule) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidRange("empty batch".into()));
    }
    let norm = 1.0 / (batch.len() * model.dim) as f64;
    let (mut x, mut h, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut total = 0.0;
    for item in batch {
        let z_t = noise_to(&item.z0, item.t, &item.eps, sched)?;
        model.forward_into(z_t.as_slice(), item.t, &mut x, &mut h, &mut out)?;
        total += out
            .iter()
            .zip(item.eps.as_slice())
            .map(|(o, e)| (o - e) * (o - e))
            .sum::<f64>()
            * norm;
    }
    Ok(total)
}

pub fn draw_batch(prior: &GmmPrior, sched: &NoiseSchedule, size: usize, rng: &mut RngStream) -> Vec<BatchItem> {
    (0..size)
        .map(|_| {
            let (z0, t, eps) = draw_objective_sample(prior, sched, rng);
            BatchItem { z0, t, eps }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidRange("learning rate must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidRange("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: Params,
    v: Params,
    step: i32,
}

impl AdamState {
    fn new(p: &Params) -> Self {
        Self { m: Params::zeros_like(p), v: Params::zeros_like(p), step: 0 }
    }

    fn apply(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let targets = params.slices_mut();
        let gs = grads.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in targets.into_iter().zip(gs).zip(ms).zip(vs) {
            for (((pi, gi), mi), vi) in p.1.iter_mut().zip(g.1).zip(m.1.iter_mut()).zip(v.1.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Runs `cfg.steps` optimizer updates on fresh batches drawn from `prior`.
/// Returns the trained model and the per-step batch loss.
pub fn train(
    mut model: TinyDenoiser,
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(TinyDenoiser, Vec<f64>)> {
    cfg.validate()?;
    if prior.dims().len() != model.dim {
        return Err(Error::dims(format!("{} inputs", model.dim), prior.dims()));
    }
    if sched.steps() != model.steps() {
        return Err(Error::dims(format!("T = {}", model.steps()), format!("T = {}", sched.steps())));
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(prior, sched, cfg.batch_size, &mut rng);
        let (l, grads) = loss_and_grad(&model, &batch, sched)?;
        if !l.is_finite() {
            return Err(Error::Divergence { iteration: step + 1 });
        }
        trace.push(l);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((_, p), (_, g)) in model.params.slices_mut().into_iter().zip(grads.slices()) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= cfg.learning_rate * gi;
                    }
                }
            }
            Optimizer::Adam => adam.apply(&mut model.params, &grads, cfg.learning_rate),
        }
        if !model.params.is_finite() {
            return Err(Error::Divergence { iteration: step + 1 });
        }
    }
    Ok((model, trace))
}

/// Held-out objective over `n` fresh draws from `rng`. Draws match
/// [`crate::denoiser::bayes_loss_estimate`] for the same stream.
pub fn held_out_loss(
    model: &TinyDenoiser,
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let batch = draw_batch(prior, sched, n, rng);
    loss(model, &batch, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = TinyDenoiser::zeros(4, 8, 4, 50).unwrap();
        let z = LatentGrid::filled(2, 2, 1, 0.7).unwrap();
        assert!(m.forward(&z, 3).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_bias_output() {
        let mut m = TinyDenoiser::init(3, 8, 4, 50, 1).unwrap();
        m.params.w2.iter_mut().for_each(|w| *w = 0.0);
        m.params.b2 = vec![0.4; 3];
        let z = LatentGrid::new(1, 3, 1, vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(m.forward(&z, 10).unwrap().as_slice(), &[0.4, 0.4, 0.4]);
    }

    #[test]
    fn forward_errors() {
        let m = TinyDenoiser::zeros(4, 8, 4, 50).unwrap();
        assert!(m.forward(&LatentGrid::zeros(1, 3, 1).unwrap(), 1).is_err());
        assert!(m.forward(&LatentGrid::zeros(1, 4, 1).unwrap(), 51).is_err());
        assert!(TinyDenoiser::zeros(65, 8, 4, 50).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        // output = b2 = eps for every item when all eps equal b2
        let sched = sched();
        let mut m = TinyDenoiser::zeros(2, 4, 4, 50).unwrap();
        m.params.b2 = vec![0.3, -0.2];
        let eps = LatentGrid::new(1, 2, 1, vec![0.3, -0.2]).unwrap();
        let batch: Vec<BatchItem> = (1..=3)
            .map(|t| BatchItem { z0: LatentGrid::new(1, 2, 1, vec![t as f64, 0.5]).unwrap(), t, eps: eps.clone() })
            .collect();
        let (l, g) = loss_and_grad(&m, &batch, &sched).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.slices().iter().all(|(_, s)| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_unit_hand_derivation() {
        // d = 1, H = 1, E = 0: out = w2 tanh(w1 z + b1) + b2
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.36, 0.36).unwrap();
        let mut m = TinyDenoiser::zeros(1, 1, 0, 1).unwrap();
        m.params = Params { w1: vec![0.5], b1: vec![-0.1], w2: vec![2.0], b2: vec![0.3] };
        let item = BatchItem {
            z0: LatentGrid::filled(1, 1, 1, 1.0).unwrap(),
            t: 1,
            eps: LatentGrid::filled(1, 1, 1, 0.5).unwrap(),
        };
        // z_t = 0.8 * 1 + 0.6 * 0.5 = 1.1; a = 0.45; h = tanh(0.45)
        let h = 0.45f64.tanh();
        let r = 2.0 * h + 0.3 - 0.5;
        let (l, g) = loss_and_grad(&m, &[item], &sched).unwrap();
        assert!((l - r * r).abs() < 1e-14);
        let da = 2.0 * r * 2.0 * (1.0 - h * h);
        assert!((g.b2[0] - 2.0 * r).abs() < 1e-14);
        assert!((g.w2[0] - 2.0 * r * h).abs() < 1e-14);
        assert!((g.b1[0] - da).abs() < 1e-14);
        assert!((g.w1[0] - da * 1.1).abs() < 1e-14);
    }

    #[test]
    fn empty_batch_is_error() {
        let m = TinyDenoiser::zeros(1, 4, 4, 50).unwrap();
        assert!(loss_and_grad(&m, &[], &sched()).is_err());
    }

    fn bimodal() -> GmmPrior {
        GmmPrior::constant_means(Dims { h: 1, w: 1, c: 1 }, &[(0.5, 2.0, 0.25), (0.5, -2.0, 0.25)]).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let sched = sched();
        let m = TinyDenoiser::init(1, 16, 8, 50, 3).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 16, steps: 20, seed: 4, optimizer: Optimizer::Sgd };
        let (trained, trace) = train(m.clone(), &bimodal(), &sched, &cfg).unwrap();
        assert_eq!(trained, m);
        assert_eq!(trace.len(), 20);
    }

    #[test]
    fn training_is_reproducible() {
        let sched = sched();
        let m = TinyDenoiser::init(1, 16, 8, 50, 3).unwrap();
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let cfg = TrainConfig { learning_rate: 0.01, batch_size: 16, steps: 50, seed: 4, optimizer };
            let a = train(m.clone(), &bimodal(), &sched, &cfg).unwrap();
            let b = train(m.clone(), &bimodal(), &sched, &cfg).unwrap();
            assert_eq!(a.1, b.1);
            assert_eq!(a.0, b.0);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let sched = sched();
        let m = TinyDenoiser::init(1, 16, 8, 50, 3).unwrap();
        let cfg = TrainConfig { learning_rate: 1e200, batch_size: 4, steps: 10, seed: 4, optimizer: Optimizer::Sgd };
        assert!(matches!(train(m, &bimodal(), &sched, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn text_round_trip() {
        let m = TinyDenoiser::init(4, 8, 4, 20, 9).unwrap();
        let back = TinyDenoiser::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_text().starts_with("PARAM w1\nGRID 8 8 1\n"));
    }
}
