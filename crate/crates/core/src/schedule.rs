//! Diffusion variance schedules.
//!
//! Timesteps are 1-indexed: `t = 1` is the first noising step and `t = T` the
//! last. Index 0 stands for clean data and is never stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serialized form of a schedule: `{kind, T, beta_start, beta_end}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 200,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Coefficients at a single timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MIN: f64 = 1e-8;
const COSINE_BETA_MAX: f64 = 0.999;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("T must be at least 1".into()));
        }
        let beta = match kind {
            ScheduleKind::Linear => {
                if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(Error::InvalidRange(format!(
                        "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
                    )));
                }
                if steps == 1 {
                    vec![beta_start]
                } else {
                    let span = beta_end - beta_start;
                    let last = (steps - 1) as f64;
                    (0..steps)
                        .map(|i| beta_start + span * (i as f64) / last)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|t| {
                        let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                        b.clamp(COSINE_BETA_MIN, COSINE_BETA_MAX)
                    })
                    .collect()
            }
        };
        Ok(Self::from_betas(kind, beta))
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self {
            kind,
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn query(&self, t: usize) -> Result<StepCoefficients> {
        let i = self.index(t)?;
        Ok(StepCoefficients {
            beta: self.beta[i],
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
            sigma: self.sigma[i],
        })
    }

    /// `alpha_bar` extended with `alpha_bar(0) = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            Ok(self.alpha_bar[self.index(t)?])
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        self.index(t).map(|_| ())
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Checks every table invariant. Returns a description of the first
    /// violation found.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.steps();
        if [self.alpha.len(), self.alpha_bar.len(), self.sigma.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err("table lengths differ".into());
        }
        for i in 0..n {
            let t = i + 1;
            let b = self.beta[i];
            if !(b > 0.0 && b < 1.0) {
                return Err(format!("beta[{t}] = {b} outside (0, 1)"));
            }
            if self.alpha[i] != 1.0 - b {
                return Err(format!("alpha[{t}] != 1 - beta[{t}]"));
            }
            if self.sigma[i] != b.sqrt() {
                return Err(format!("sigma[{t}] != sqrt(beta[{t}])"));
            }
            let prev = if i == 0 { 1.0 } else { self.alpha_bar[i - 1] };
            let expect = prev * self.alpha[i];
            if (self.alpha_bar[i] - expect).abs() > 1e-12 * expect.abs() {
                return Err(format!("alpha_bar[{t}] breaks the product recurrence"));
            }
            if i > 0 && self.alpha_bar[i] >= prev {
                return Err(format!("alpha_bar not strictly decreasing at t={t}"));
            }
        }
        Ok(())
    }

    /// Test hook: overwrite one beta without recomputing the derived tables.
    #[doc(hidden)]
    pub fn corrupt_beta_for_testing(&mut self, t: usize, value: f64) {
        self.beta[t - 1] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn linear_four_steps() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 4, 0.1, 0.4).unwrap();
        for (got, want) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!(close(*got, want), "{got} vs {want}");
        }
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!(close(*got, want), "{got} vs {want}");
        }
        assert!(close(s.query(2).unwrap().alpha_bar, 0.72));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let q = s.query(1).unwrap();
        assert_eq!(q.alpha_bar, q.alpha);
    }

    #[test]
    fn cosine_thousand() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 0.0, 0.0).unwrap();
        assert!(s.validate().is_ok());
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.query(1000).unwrap().alpha_bar < 1e-3);
        assert!(s.betas().iter().all(|b| (1e-8..=0.999).contains(b)));
    }

    #[test]
    fn query_bounds() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 4, 0.1, 0.4).unwrap();
        assert!(matches!(s.query(0), Err(Error::Timestep { t: 0, .. })));
        assert!(matches!(s.query(5), Err(Error::Timestep { t: 5, .. })));
    }

    #[test]
    fn bad_ranges() {
        for (t, b0, b1) in [(0, 0.1, 0.2), (4, 0.0, 0.2), (4, 0.3, 0.2), (4, 0.1, 1.0)] {
            assert!(matches!(
                NoiseSchedule::build(ScheduleKind::Linear, t, b0, b1),
                Err(Error::InvalidRange(_))
            ));
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let a = NoiseSchedule::build(kind, 333, 1e-4, 0.02).unwrap();
            let b = NoiseSchedule::build(kind, 333, 1e-4, 0.02).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut s = NoiseSchedule::build(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        s.corrupt_beta_for_testing(3, 0.5);
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_serializes_with_capital_t() {
        let spec = ScheduleSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"T\":200"), "{text}");
        let back: ScheduleSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
