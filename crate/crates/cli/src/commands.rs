use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use iteredit::config::{DriftSpec, EbmSpec, PriorSpec, RunConfig, TrainingSpec};
use iteredit::editor::{open_session, EditRecord, Strategy};
use iteredit::experiments::{
    drift_experiment, ebm_equivalence_experiment, locality_experiment, write_report, DriftReport, EbmReport,
    LocalityReport, ReportFormat, ReportRow,
};
use iteredit::schedule::{ScheduleKind, ScheduleSpec};
use iteredit::training::{held_out_loss, train as train_model, TinyDenoiser};
use iteredit::verify::{run_checks, FaultInjection};
use iteredit::{bayes_loss_estimate, Error, RngStream};

/// Held-out loss may exceed the exact denoiser's by at most this factor.
pub const TRAINING_FLOOR_FACTOR: f64 = 1.15;
/// Acceptable outside/inside ratio band for the unmasked control.
pub const CONTROL_RATIO_BAND: (f64, f64) = (0.8, 1.25);
/// Seed used when neither a config nor `--seed` gives one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration and input files.
    Config(String),
    /// Failure while running.
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: Error) -> CliError {
    match e {
        e @ (Error::Config { .. } | Error::Parse { .. }) => CliError::Config(e.to_string()),
        e => CliError::Run(e.to_string()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub command: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub outputs: Vec<PathBuf>,
}

impl Outcome {
    fn new(command: &str, checks: Vec<Check>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            outputs,
        }
    }
}

fn load(path: Option<&Path>, opts: &Options, fallback: impl FnOnce(u64) -> RunConfig) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(config_err)?,
        None => fallback(opts.seed.unwrap_or(DEFAULT_SEED)),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn bare(seed: u64) -> RunConfig {
    RunConfig::parse(&format!("seed = {seed}\n")).expect("minimal config parses")
}

fn output_dir(cfg: &RunConfig, opts: &Options, default: &str) -> Result<PathBuf, CliError> {
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("iteredit-out").join(default));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_both<R: ReportRow>(rows: &[R], dir: &Path, stem: &str) -> Result<Vec<PathBuf>, CliError> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    write_report(rows, &csv, ReportFormat::Csv).map_err(run_err)?;
    write_report(rows, &json, ReportFormat::Json).map_err(run_err)?;
    Ok(vec![csv, json])
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SessionLog<'a> {
    strategy: Strategy,
    seed: u64,
    reuse_init: bool,
    edits: &'a [EditRecord],
    encode_calls: usize,
    renorm_roundtrips: usize,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Timing {
    per_edit_ms: Vec<f64>,
    total_ms: f64,
}

pub fn run_session(path: &Path, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = load(Some(path), opts, bare)?;
    let loaded = cfg.load_session().map_err(run_err)?;
    let dir = output_dir(&cfg, opts, "session")?;
    let mut session =
        open_session(loaded.image, loaded.edits, loaded.masks, loaded.config).map_err(config_err)?;
    let start = Instant::now();
    let mut per_edit = Vec::new();
    while session.remaining() > 0 {
        let t0 = Instant::now();
        session.apply_edit().map_err(run_err)?;
        per_edit.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut outputs = Vec::new();
    let mut names = Vec::new();
    for (i, image) in session.outputs().iter().enumerate() {
        let name = format!("edit_{:03}.grid", i + 1);
        let p = dir.join(&name);
        image.write(&p).map_err(run_err)?;
        outputs.push(p);
        names.push(name);
    }
    let log = SessionLog {
        strategy: session.strategy(),
        seed: cfg.seed,
        reuse_init: session.config().reuse_init,
        edits: session.records(),
        encode_calls: session.encode_calls(),
        renorm_roundtrips: session.renorm_roundtrips(),
        outputs: names,
    };
    let log_path = dir.join("session_log.json");
    write_json(&log_path, &log)?;
    let timing_path = dir.join("timing.json");
    write_json(&timing_path, &Timing { per_edit_ms: per_edit, total_ms })?;
    outputs.push(log_path);
    outputs.push(timing_path);
    let n = session.outputs().len();
    let checks = vec![Check::new("session", true, format!("{n} edits applied with {}", session.strategy()))];
    Ok(Outcome::new("run-session", checks, outputs))
}

// ---------------------------------------------------------------------------

pub fn drift_checks(report: &DriftReport) -> Vec<Check> {
    let mut checks = Vec::new();
    let image = report.curve(Strategy::ImageIteration);
    let latent = report.curve(Strategy::LatentIteration);
    let blur = report.curve(Strategy::BlurBaseline);
    if !image.is_empty() {
        let bad = image.windows(2).position(|w| w[1] < w[0]);
        checks.push(Check::new(
            "image_iteration_non_decreasing",
            bad.is_none(),
            match bad {
                None => format!("rmse {:.4} -> {:.4} over {} steps", image[0], image[image.len() - 1], image.len()),
                Some(i) => format!("drops at step {}: {:.6} -> {:.6}", i + 2, image[i], image[i + 1]),
            },
        ));
    }
    if !image.is_empty() && !latent.is_empty() {
        let bad = (1..image.len().min(latent.len())).find(|&i| latent[i] > image[i]);
        checks.push(Check::new(
            "latent_below_image",
            bad.is_none(),
            match bad {
                None => format!("final latent {:.4} vs image {:.4}", latent[latent.len() - 1], image[image.len() - 1]),
                Some(i) => format!("step {}: latent {:.6} > image {:.6}", i + 1, latent[i], image[i]),
            },
        ));
    }
    if let (Some(&l), Some(&b), Some(&i)) = (latent.last(), blur.last(), image.last()) {
        checks.push(Check::new(
            "blur_between",
            l <= b && b <= i,
            format!("final rmse latent {l:.4}, blur {b:.4}, image {i:.4}"),
        ));
    }
    checks
}

pub fn bench_drift(path: Option<&Path>, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = load(path, opts, |seed| RunConfig { drift: Some(DriftSpec::default()), ..bare(seed) })?;
    let spec = cfg.drift.clone().unwrap_or_default();
    let fixture = cfg.drift_input().map_err(config_err)?;
    let exp = cfg.experiment().map_err(config_err)?;
    let report = drift_experiment(&fixture, &spec.strategies, spec.steps, spec.target_scale, &exp).map_err(run_err)?;
    let dir = output_dir(&cfg, opts, "drift")?;
    let outputs = write_both(&report.rows, &dir, "drift")?;
    Ok(Outcome::new("bench-drift", drift_checks(&report), outputs))
}

// ---------------------------------------------------------------------------

pub fn locality_checks(report: &LocalityReport) -> Vec<Check> {
    let mut checks = Vec::new();
    let ratio = |m: &str| report.row(m).and_then(|r| r.ratio);
    if let Some(pin) = report.row("pin") {
        checks.push(Check::new(
            "pin_outside_zero",
            pin.outside_rms == 0.0,
            format!("outside rms {:e}", pin.outside_rms),
        ));
    }
    if let (Some(p), Some(d), Some(u)) = (ratio("pin"), ratio("direction"), ratio("unmasked")) {
        checks.push(Check::new(
            "ratio_ordering",
            p < d && d < u,
            format!("pin {p:.4} < direction {d:.4} < unmasked {u:.4}"),
        ));
    }
    if let Some(u) = ratio("unmasked") {
        let (lo, hi) = CONTROL_RATIO_BAND;
        checks.push(Check::new(
            "control_ratio_band",
            (lo..=hi).contains(&u),
            format!("unmasked ratio {u:.4} in [{lo}, {hi}]"),
        ));
    }
    checks
}

pub fn bench_locality(path: Option<&Path>, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = load(path, opts, bare)?;
    let spec = cfg.locality.clone().unwrap_or_default();
    let (fixture, mask) = cfg.locality_inputs().map_err(config_err)?;
    let exp = cfg.experiment().map_err(config_err)?;
    let latent = cfg.codec.latent_dims(fixture.dims()).map_err(config_err)?;
    let edit = iteredit::EditInstruction::constant("locality", latent, spec.gain, spec.bias, spec.scale)
        .map_err(config_err)?;
    let report = locality_experiment(&fixture, &edit, &mask, &spec.modes, &exp).map_err(run_err)?;
    let dir = output_dir(&cfg, opts, "locality")?;
    let outputs = write_both(&report.rows, &dir, "locality")?;
    Ok(Outcome::new("bench-locality", locality_checks(&report), outputs))
}

// ---------------------------------------------------------------------------

/// The two reference priors used when the config names none.
pub fn reference_priors() -> Vec<(&'static str, PriorSpec)> {
    vec![("gaussian", PriorSpec::gaussian(3.0, 1.0)), ("bimodal", PriorSpec::bimodal(2.0, 0.25))]
}

pub fn bench_ebm(path: Option<&Path>, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = load(path, opts, |seed| RunConfig { ebm: Some(EbmSpec::default()), ..bare(seed) })?;
    let spec = cfg.ebm.clone().unwrap_or_default();
    let sched = cfg.schedule().map_err(config_err)?;
    let priors: Vec<(String, PriorSpec)> = match &cfg.prior {
        Some(p) => vec![("prior".to_string(), p.clone())],
        None => reference_priors().into_iter().map(|(n, p)| (n.to_string(), p)).collect(),
    };
    let mut report = EbmReport::default();
    let mut checks = Vec::new();
    for (name, p) in &priors {
        let prior = p.build().map_err(config_err)?;
        let r = ebm_equivalence_experiment(name, &prior, &sched, &cfg.sampler, &spec.langevin(), spec.chains, cfg.seed)
            .map_err(run_err)?;
        let worst_mean = r.rows.iter().map(|x| x.mean_gap).fold(0.0, f64::max);
        let worst_var = r.rows.iter().map(|x| x.rel_var_gap).fold(0.0, f64::max);
        checks.push(Check::new(
            &format!("ebm_{name}"),
            r.passes(spec.max_mean_gap, spec.max_rel_var_gap),
            format!(
                "|dmean| {worst_mean:.4} (max {}), rel |dvar| {worst_var:.4} (max {})",
                spec.max_mean_gap, spec.max_rel_var_gap
            ),
        ));
        report.rows.extend(r.rows);
    }
    let dir = output_dir(&cfg, opts, "ebm")?;
    let outputs = write_both(&report.rows, &dir, "ebm")?;
    Ok(Outcome::new("bench-ebm", checks, outputs))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_batch_loss: Option<f64>,
    held_out_loss: f64,
    bayes_loss: f64,
    ratio: f64,
}

/// Built-in training setup: 1-D two-component mixture, T = 50.
pub fn default_train_config(seed: u64) -> RunConfig {
    RunConfig {
        schedule: ScheduleSpec { kind: ScheduleKind::Linear, steps: 50, ..ScheduleSpec::default() },
        prior: Some(PriorSpec::bimodal(2.0, 0.25)),
        training: Some(TrainingSpec::default()),
        ..bare(seed)
    }
}

pub fn train(path: Option<&Path>, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = load(path, opts, default_train_config)?;
    let spec = cfg.training.clone().unwrap_or_default();
    let prior = cfg
        .prior
        .clone()
        .unwrap_or_else(|| PriorSpec::bimodal(2.0, 0.25))
        .build()
        .map_err(config_err)?;
    let sched = cfg.schedule().map_err(config_err)?;
    let dim = prior.dims().len();
    let model = TinyDenoiser::init(dim, spec.hidden, spec.embed, sched.steps(), cfg.seed.wrapping_add(1))
        .map_err(config_err)?;
    let (model, trace) = train_model(model, &prior, &sched, &spec.train_config(cfg.seed)).map_err(run_err)?;

    // identical evaluation draws for the model and the exact denoiser
    let held_out = held_out_loss(&model, &prior, &sched, spec.held_out, &mut RngStream::derived(cfg.seed, 1))
        .map_err(run_err)?;
    let bayes = bayes_loss_estimate(&prior, &sched, spec.held_out, &mut RngStream::derived(cfg.seed, 1))
        .map_err(run_err)?;

    let dir = output_dir(&cfg, opts, "train")?;
    let model_path = dir.join("model.params");
    model.save(&model_path).map_err(run_err)?;
    let trace_path = dir.join("loss_trace.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(&trace_path, csv).map_err(|e| CliError::Run(format!("{}: {e}", trace_path.display())))?;
    let summary_path = dir.join("train_summary.json");
    let ratio = held_out / bayes;
    write_json(
        &summary_path,
        &TrainSummary { steps: trace.len(), final_batch_loss: trace.last().copied(), held_out_loss: held_out, bayes_loss: bayes, ratio },
    )?;
    let checks = vec![Check::new(
        "training_floor",
        ratio <= TRAINING_FLOOR_FACTOR,
        format!("held-out {held_out:.5} vs exact {bayes:.5}, ratio {ratio:.4} (max {TRAINING_FLOOR_FACTOR})"),
    )];
    Ok(Outcome::new("train", checks, vec![model_path, trace_path, summary_path]))
}

// ---------------------------------------------------------------------------

pub fn verify(corrupt_schedule: bool) -> Outcome {
    let checks = run_checks(FaultInjection { corrupt_schedule })
        .into_iter()
        .map(|c| Check::new(&c.name, c.passed, c.detail))
        .collect();
    Outcome::new("verify", checks, Vec::new())
}
