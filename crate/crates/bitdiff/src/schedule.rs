//! Bernoulli noise schedule: beta_t, alpha_t = 1 - beta_t, the cumulative
//! product alpha_bar_t, and the cumulative flip bias
//! b_t = (1 - beta_t) b_{t-1} + 0.5 beta_t with b_1 = 0.5 beta_1.
//!
//! Timesteps are 1-based: t runs over [1, T]. Everything is precomputed in
//! double precision and immutable after construction.

use crate::error::{Error, Result};
use std::f64::consts::PI;
use std::fmt;

const COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    b: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule with `timesteps` steps. The cosine kind derives
    /// beta_t from the squared-cosine alpha_bar curve (clipped to
    /// beta_t <= 0.999) and ignores the beta bounds.
    pub fn build(
        kind: ScheduleKind,
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if timesteps < 1 {
            return Err(Error::InvalidRange("timesteps must be >= 1".into()));
        }
        let beta = match kind {
            ScheduleKind::Linear => {
                if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
                    return Err(Error::InvalidRange(format!(
                        "beta bounds must lie in (0, 1), got ({beta_start}, {beta_end})"
                    )));
                }
                if beta_start > beta_end {
                    return Err(Error::InvalidRange(format!(
                        "beta_start {beta_start} exceeds beta_end {beta_end}"
                    )));
                }
                linear_betas(timesteps, beta_start, beta_end)
            }
            ScheduleKind::Cosine => cosine_betas(timesteps),
        };
        Ok(Self::from_betas(kind, beta_start, beta_end, beta))
    }

    /// Rebuild the derived tables from a beta sequence (checkpoint load path).
    pub fn from_betas(kind: ScheduleKind, beta_start: f64, beta_end: f64, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        // b_t by the recursion, not the closed form; the tests compare the two.
        let mut b = Vec::with_capacity(beta.len());
        let mut prev = 0.0;
        for bt in &beta {
            prev = (1.0 - bt) * prev + 0.5 * bt;
            b.push(prev);
        }
        Self { kind, beta_start, beta_end, beta, alpha, alpha_bar, b }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    /// Number of timesteps T.
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.beta.len() {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside [1, {}]",
                self.beta.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn b(&self, t: usize) -> Result<f64> {
        Ok(self.b[self.check_t(t)?])
    }

    /// alpha_bar_{t-1} with the convention alpha_bar_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let idx = self.check_t(t)?;
        Ok(if idx == 0 { 1.0 } else { self.alpha_bar[idx - 1] })
    }

    /// Marginal flip probability (1 - alpha_bar_t) / 2 of the closed-form
    /// jump; lies in (0, 0.5).
    pub fn flip_probability(&self, t: usize) -> Result<f64> {
        let idx = self.check_t(t)?;
        Ok((1.0 - self.alpha_bar[idx]) / 2.0)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// CSV dump of all tables, one row per timestep.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,b\n");
        for i in 0..self.beta.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i],
                self.b[i]
            ));
        }
        out
    }
}

fn linear_betas(timesteps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    if timesteps == 1 {
        return vec![beta_start];
    }
    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
    (0..timesteps).map(|i| beta_start + step * i as f64).collect()
}

fn cosine_betas(timesteps: usize) -> Vec<f64> {
    let f = |s: f64| {
        let x = (s / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    (1..=timesteps)
        .map(|t| {
            let bar_t = f(t as f64) / f0;
            let bar_prev = f((t - 1) as f64) / f0;
            (1.0 - bar_t / bar_prev).min(COSINE_BETA_MAX)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_base_case() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(s.b(1).unwrap(), 0.25);
    }

    #[test]
    fn two_step_hand_evaluation() {
        // b_2 = 0.6 * 0.1 + 0.5 * 0.4 = 0.26 and (1 - 0.48) / 2 = 0.26.
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 0.2, 0.4).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.8).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.48).abs() < 1e-15);
        assert!((s.b(1).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.b(2).unwrap() - 0.26).abs() < 1e-15);
        assert!((s.flip_probability(2).unwrap() - 0.26).abs() < 1e-15);
    }

    #[test]
    fn recursion_matches_closed_form_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let tol = 8.0 * f64::EPSILON * 1000.0;
        for t in 1..=1000 {
            let closed = (1.0 - s.alpha_bar(t).unwrap()) / 2.0;
            assert!(
                (s.b(t).unwrap() - closed).abs() <= tol,
                "t={t}: {} vs {}",
                s.b(t).unwrap(),
                closed
            );
        }
    }

    #[test]
    fn flip_probability_strictly_increasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 500, 1e-4, 0.02).unwrap();
            let mut prev = 0.0;
            for t in 1..=500 {
                let p = s.flip_probability(t).unwrap();
                assert!(p > prev && p < 0.5, "{kind:?} t={t}");
                prev = p;
            }
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, 0.0, 0.0).unwrap();
        let mut prev = 1.0;
        for t in 1..=1000 {
            let a = s.alpha_bar(t).unwrap();
            assert!(a < prev && a > 0.0 && a < 1.0);
            prev = a;
        }
        // Cosine betas stay clipped below 0.999.
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= COSINE_BETA_MAX));
    }

    #[test]
    fn invalid_arguments_rejected() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.1, 0.2).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
    }

    #[test]
    fn identical_arguments_give_bit_identical_tables() {
        let a = NoiseSchedule::build(ScheduleKind::Cosine, 300, 0.0, 0.0).unwrap();
        let b = NoiseSchedule::build(ScheduleKind::Cosine, 300, 0.0, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_dump_has_header_and_all_rows() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 3, 0.1, 0.3).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar,b");
        assert!(lines[1].starts_with("1,0.1,"));
    }
}
