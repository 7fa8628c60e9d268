//! The Bernoulli process core: forward noising (stepwise and closed-form
//! jump), the exact posterior over the previous latent, and ancestral
//! sampling of the reverse chain.
//!
//! Forward step: q(z_t | z_{t-1}) = B((1 - beta_t) z_{t-1} + beta_t / 2).
//! Closed-form jump: z_t = z_0 XOR e with e ~ B((1 - alpha_bar_t) / 2).
//! Every stochastic op is a pure function of its inputs and the rng stream.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::{BitTensor, Dims, ProbTensor};

/// Smallest normalizer we divide by; smaller values are reported as
/// degenerate entries.
const NORMALIZER_FLOOR: f64 = 1e-300;
/// How many offending entry indices a degenerate-posterior error carries.
const DEGENERATE_REPORT_LIMIT: usize = 8;

/// Entrywise independent Bernoulli draw.
pub fn bernoulli_sample(p: &ProbTensor, rng: &mut RngStream) -> BitTensor {
    p.sample(rng)
}

/// One forward noising step q(z_t | z_{t-1}).
pub fn forward_step(
    z_prev: &BitTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<BitTensor> {
    let beta = schedule.beta(t)?;
    let half_beta = 0.5 * beta;
    let keep = 1.0 - beta;
    let probs: Vec<f64> =
        z_prev.data().iter().map(|&z| keep * f64::from(z) + half_beta).collect();
    let p = ProbTensor::new(z_prev.dims(), probs)?;
    Ok(p.sample(rng))
}

/// Closed-form jump to time t: z_0 XOR an independent Bernoulli flip field
/// at rate (1 - alpha_bar_t) / 2.
pub fn forward_jump(
    z0: &BitTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<BitTensor> {
    let rate = schedule.flip_probability(t)?;
    let noise = ProbTensor::constant(z0.dims(), rate)?.sample(rng);
    z0.xor(&noise)
}

/// Exact Bernoulli posterior parameter theta_post(z_t, z0_est) for
/// q(z_{t-1} | z_t, z_0), entrywise:
///
///   num1 = ((1-beta_t) z_t + 0.5 beta_t) (abar_{t-1} z0 + (1-abar_{t-1})/2)
///   num0 = ((1-beta_t)(1-z_t) + 0.5 beta_t) (abar_{t-1}(1-z0) + (1-abar_{t-1})/2)
///   theta = num1 / (num1 + num0)
///
/// with the convention alpha_bar_0 = 1 at t = 1, which collapses theta to
/// z0_est for binary z0_est. `z0_est` may be a relaxed estimate in [0, 1];
/// the formula is linear in z_0 so the mixture is the exact posterior of the
/// mixture prior.
pub fn posterior_theta(
    z_t: &BitTensor,
    z0_est: &ProbTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ProbTensor> {
    if z_t.dims() != z0_est.dims() {
        return Err(Error::ShapeMismatch(format!(
            "posterior: z_t {} vs z0 estimate {}",
            z_t.dims(),
            z0_est.dims()
        )));
    }
    let beta = schedule.beta(t)?;
    let abar_prev = schedule.alpha_bar_prev(t)?;
    let keep = 1.0 - beta;
    let half_beta = 0.5 * beta;
    let half_flip_prev = (1.0 - abar_prev) / 2.0;

    let mut theta = Vec::with_capacity(z_t.dims().len());
    let mut degenerate: Vec<usize> = Vec::new();
    let mut degenerate_total = 0usize;
    for (idx, (&zt, &z0)) in z_t.data().iter().zip(z0_est.data()).enumerate() {
        let zt = f64::from(zt);
        let num1 = (keep * zt + half_beta) * (abar_prev * z0 + half_flip_prev);
        let num0 = (keep * (1.0 - zt) + half_beta) * (abar_prev * (1.0 - z0) + half_flip_prev);
        let z = num1 + num0;
        if z < f64::MIN_POSITIVE {
            degenerate_total += 1;
            if degenerate.len() < DEGENERATE_REPORT_LIMIT {
                degenerate.push(idx);
            }
        }
        theta.push(num1 / z.max(NORMALIZER_FLOOR));
    }
    if degenerate_total > 0 {
        return Err(Error::DegeneratePosterior { entries: degenerate, total: degenerate_total });
    }
    ProbTensor::new(z_t.dims(), theta)
}

/// One reverse step: draw z_{t-1} ~ B(theta_post(z_t, z0_est)).
pub fn sample_step(
    z_t: &BitTensor,
    z0_est: &ProbTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<BitTensor> {
    let theta = posterior_theta(z_t, z0_est, t, schedule)?;
    Ok(theta.sample(rng))
}

/// Residual-to-clean estimate: z0 = |z_t - eps_hat| entrywise.
pub fn predict_z0(z_t: &BitTensor, eps_hat: &ProbTensor) -> Result<ProbTensor> {
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::ShapeMismatch(format!(
            "z0 prediction: z_t {} vs eps {}",
            z_t.dims(),
            eps_hat.dims()
        )));
    }
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| (f64::from(z) - e).abs())
        .collect();
    ProbTensor::new(z_t.dims(), data)
}

/// Ancestral sampling: start from z_T ~ B(1/2) and walk t = T..1, feeding
/// the denoiser's clean estimate into the posterior at every step.
pub fn generate(
    denoiser: &dyn Denoiser,
    shape: Dims,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<BitTensor> {
    let mut z = ProbTensor::constant(shape, 0.5)?.sample(rng);
    for t in (1..=schedule.timesteps()).rev() {
        let eps = denoiser
            .predict(&z, t)
            .map_err(|e| Error::InvalidPrediction(format!("denoiser at t={t}: {e}")))?;
        let z0_est = predict_z0(&z, &eps)?;
        z = sample_step(&z, &z0_est, t, schedule, rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::schedule::ScheduleKind;

    fn dims(n: usize) -> Dims {
        Dims::new(1, 1, n)
    }

    fn random_bits(n: usize, rng: &mut RngStream) -> BitTensor {
        ProbTensor::constant(dims(n), 0.5).unwrap().sample(rng)
    }

    /// Ground-truth posterior by enumerating z_{t-1} in {0, 1}: prior from
    /// the closed-form marginal at t-1, likelihood from the forward step.
    fn bayes_enumeration(z_t: u8, z0: f64, beta: f64, abar_prev: f64) -> f64 {
        let flip_prev = (1.0 - abar_prev) / 2.0;
        let mut num = [0.0f64; 2];
        for (v, slot) in num.iter_mut().enumerate() {
            let v = v as f64;
            // P(z_{t-1} = v | z_0), linear in a relaxed z_0.
            let prior =
                z0 * if v == 1.0 { 1.0 - flip_prev } else { flip_prev }
                    + (1.0 - z0) * if v == 1.0 { flip_prev } else { 1.0 - flip_prev };
            let p1 = (1.0 - beta) * v + beta / 2.0;
            let likelihood = if z_t == 1 { p1 } else { 1.0 - p1 };
            *slot = likelihood * prior;
        }
        num[1] / (num[0] + num[1])
    }

    #[test]
    fn bernoulli_sample_degenerate_and_mean() {
        let mut rng = RngStream::new(1);
        let n = 100_000;
        let zeros = ProbTensor::constant(dims(n), 0.0).unwrap().sample(&mut rng);
        assert_eq!(zeros.count_ones(), 0);
        let ones = ProbTensor::constant(dims(n), 1.0).unwrap().sample(&mut rng);
        assert_eq!(ones.count_ones(), n);
        let half = ProbTensor::constant(dims(n), 0.5).unwrap().sample(&mut rng);
        let mean = half.count_ones() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn forward_step_keeps_input_at_zero_beta() {
        // beta_start = beta_end at the smallest legal value; a draw at
        // p in {~0, ~1} is still stochastic, so use an exactly-zero beta via
        // a hand-built schedule.
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.0]);
        let mut rng = RngStream::new(2);
        let z = random_bits(256, &mut rng);
        let out = forward_step(&z, 1, &s, &mut rng).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn forward_step_uniform_at_full_beta() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 1.0, 1.0, vec![1.0]);
        let mut rng = RngStream::new(3);
        let n = 100_000;
        let z = BitTensor::new(dims(n), vec![1; n]).unwrap();
        let out = forward_step(&z, 1, &s, &mut rng).unwrap();
        let mean = out.count_ones() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn forward_step_matches_binomial_rate() {
        // All-ones input, beta = 0.2: expect ones at rate 0.9.
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.2, 0.2, vec![0.2]);
        let mut rng = RngStream::new(4);
        let n = 100_000;
        let z = BitTensor::new(dims(n), vec![1; n]).unwrap();
        let out = forward_step(&z, 1, &s, &mut rng).unwrap();
        let mean = out.count_ones() as f64 / n as f64;
        assert!((mean - 0.9).abs() < 3.0 * (0.09f64 / n as f64).sqrt());
    }

    #[test]
    fn forward_jump_matches_flip_rate() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 2, 0.2, 0.4).unwrap();
        let rate = s.flip_probability(2).unwrap();
        assert!((rate - 0.26).abs() < 1e-15);
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let z0 = BitTensor::zeros(dims(n));
        let out = forward_jump(&z0, 2, &s, &mut rng).unwrap();
        let mean = out.count_ones() as f64 / n as f64;
        assert!((mean - rate).abs() < 3.0 * (rate * (1.0 - rate) / n as f64).sqrt());
    }

    #[test]
    fn stepwise_composition_matches_jump_marginal() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 20, 0.01, 0.08).unwrap();
        let t = 20;
        let mut rng = RngStream::new(6);
        let n = 100_000;
        let z0 = BitTensor::zeros(dims(n));
        let mut z = z0.clone();
        for step in 1..=t {
            z = forward_step(&z, step, &s, &mut rng).unwrap();
        }
        let composed = z.xor(&z0).unwrap().count_ones() as f64 / n as f64;
        let rate = s.flip_probability(t).unwrap();
        assert!((composed - rate).abs() < 3.0 * (rate * (1.0 - rate) / n as f64).sqrt());
    }

    #[test]
    fn posterior_matches_bayes_enumeration() {
        let mut rng = RngStream::new(7);
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 50, 5e-3, 0.3).unwrap();
            for t in 1..=50 {
                for zt in [0u8, 1u8] {
                    // Binary and relaxed clean estimates.
                    for z0 in [0.0, 1.0, rng.next_f64()] {
                        let z_t = BitTensor::new(dims(1), vec![zt]).unwrap();
                        let est = ProbTensor::new(dims(1), vec![z0]).unwrap();
                        let got = posterior_theta(&z_t, &est, t, &s).unwrap().data()[0];
                        let want = bayes_enumeration(
                            zt,
                            z0,
                            s.beta(t).unwrap(),
                            s.alpha_bar_prev(t).unwrap(),
                        );
                        assert!(
                            (got - want).abs() <= 1e-12,
                            "{kind:?} t={t} zt={zt} z0={z0}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_hand_example() {
        // z_t = 1, z0 = 1, beta = 0.1, abar_prev = 0.8:
        // (0.95 * 0.9) / (0.95 * 0.9 + 0.05 * 0.1) = 0.855 / 0.860.
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.2, 0.1]);
        assert!((s.alpha_bar_prev(2).unwrap() - 0.8).abs() < 1e-15);
        let z_t = BitTensor::new(dims(1), vec![1]).unwrap();
        let est = ProbTensor::new(dims(1), vec![1.0]).unwrap();
        let got = posterior_theta(&z_t, &est, 2, &s).unwrap().data()[0];
        assert!((got - 0.855 / 0.860).abs() < 1e-15);
    }

    #[test]
    fn posterior_zero_beta_pins_previous_to_current() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.3, 0.0]);
        let z_t = BitTensor::new(dims(2), vec![1, 0]).unwrap();
        let est = ProbTensor::new(dims(2), vec![0.4, 0.6]).unwrap();
        let theta = posterior_theta(&z_t, &est, 2, &s).unwrap();
        assert_eq!(theta.data(), &[1.0, 0.0]);
    }

    #[test]
    fn posterior_t1_collapses_to_binary_estimate() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 5, 0.1, 0.3).unwrap();
        let z_t = BitTensor::new(dims(2), vec![1, 0]).unwrap();
        let est = ProbTensor::new(dims(2), vec![0.0, 1.0]).unwrap();
        let theta = posterior_theta(&z_t, &est, 1, &s).unwrap();
        assert_eq!(theta.data(), &[0.0, 1.0]);
    }

    #[test]
    fn posterior_degenerate_combination_is_reported() {
        // Noiseless step with contradictory (z_t, z0) at t = 1 makes both
        // numerators vanish.
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.0]);
        let z_t = BitTensor::new(dims(2), vec![1, 0]).unwrap();
        let est = ProbTensor::new(dims(2), vec![0.0, 0.0]).unwrap();
        match posterior_theta(&z_t, &est, 1, &s) {
            Err(Error::DegeneratePosterior { entries, total }) => {
                assert_eq!(entries, vec![0]);
                assert_eq!(total, 1);
            }
            other => panic!("expected degenerate posterior, got {other:?}"),
        }
    }

    #[test]
    fn sample_step_degenerate_cases_are_exact() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.3, 0.0]);
        let mut rng = RngStream::new(8);
        let z_t = random_bits(64, &mut rng);
        let est = ProbTensor::constant(dims(64), 0.5).unwrap();
        // beta = 0 pins the draw to z_t.
        let out = sample_step(&z_t, &est, 2, &s, &mut rng).unwrap();
        assert_eq!(out, z_t);
        // t = 1 with a binary estimate pins the draw to the estimate.
        let est_bits = random_bits(64, &mut rng);
        let out = sample_step(&z_t, &est_bits.to_probs(), 1, &s, &mut rng).unwrap();
        assert_eq!(out, est_bits);
    }

    #[test]
    fn sample_step_rate_matches_posterior_value() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, 0.0, 0.0, vec![0.2, 0.1]);
        let n = 100_000;
        let z_t = BitTensor::new(dims(n), vec![1; n]).unwrap();
        let est = ProbTensor::constant(dims(n), 1.0).unwrap();
        let mut rng = RngStream::new(9);
        let out = sample_step(&z_t, &est, 2, &s, &mut rng).unwrap();
        let p = 0.855 / 0.860;
        let mean = out.count_ones() as f64 / n as f64;
        assert!((mean - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn generate_with_oracle_recovers_target() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.05, 0.3).unwrap();
        let mut rng = RngStream::new(10);
        let target = random_bits(128, &mut rng);
        let oracle = OracleDenoiser::new(target.clone(), 1e-6);
        let out = generate(&oracle, target.dims(), &s, &mut rng.derive(1)).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn generate_is_deterministic_and_binary() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 8, 0.05, 0.3).unwrap();
        let mut rng = RngStream::new(11);
        let target = random_bits(64, &mut rng);
        let oracle = OracleDenoiser::new(target.clone(), 1e-6);
        let a = generate(&oracle, target.dims(), &s, &mut RngStream::new(99)).unwrap();
        let b = generate(&oracle, target.dims(), &s, &mut RngStream::new(99)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v <= 1));
    }
}
