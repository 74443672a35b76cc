//! Variance-preserving noise schedule and the deterministic sampler step.

use serde::{Deserialize, Serialize};
use tinyvid_autodiff::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Discrete schedule with T+1 entries; alpha[0] = 1 (clean), alpha[T] ~ 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

// Squared-alpha floors keep alpha[T] strictly positive so the sampler's
// division by alpha never hits zero.
const LINEAR_ABAR_MIN: f64 = 1e-4;
const COSINE_ABAR_MIN: f64 = 1e-5;
const COSINE_S: f64 = 0.008;

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs at least 1 step"));
    }
    let mut alpha = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let frac = t as f64 / steps as f64;
        let abar = match kind {
            ScheduleKind::Linear => 1.0 - (1.0 - LINEAR_ABAR_MIN) * frac,
            ScheduleKind::Cosine => {
                // Squared-cosine profile over square-root-warped time. The
                // warp keeps roughly half the signal variance inside the
                // final quarter of the chain, so late refinement steps have
                // real denoising work left instead of collapsing to no-ops.
                let f = |u: f64| {
                    let inner = (u + COSINE_S) / (1.0 + COSINE_S);
                    (inner * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (f(frac.sqrt()) / f(0.0)).max(COSINE_ABAR_MIN)
            }
        };
        alpha.push(abar.sqrt());
    }
    let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
    Ok(NoiseSchedule { steps, kind, alpha, sigma })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!("t={t} outside schedule of {} steps", self.steps)));
        }
        Ok(())
    }
}

/// Forward corruption: alpha[t] * z0 + sigma[t] * eps.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    sched.check_t(t)?;
    Ok(z0.affine(sched.alpha[t], 0.0).add(&eps.affine(sched.sigma[t], 0.0)))
}

/// One deterministic sampler update from level t to t_prev:
/// recover z0_pred = (z_t - sigma[t] eps_hat) / alpha[t], then re-noise.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    if t_prev >= t {
        return Err(Error::invalid(format!("need t > t_prev, got t={t}, t_prev={t_prev}")));
    }
    sched.check_t(t)?;
    let a_t = sched.alpha[t];
    if a_t == 0.0 {
        return Err(Error::NumericSingularity(format!("alpha[{t}] is zero")));
    }
    let z0_pred = z_t.affine(1.0 / a_t, 0.0).add(&eps_hat.affine(-sched.sigma[t] / a_t, 0.0));
    Ok(z0_pred
        .affine(sched.alpha[t_prev], 0.0)
        .add(&eps_hat.affine(sched.sigma[t_prev], 0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tinyvid_autodiff::RawTensor;

    fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::leaf(RawTensor::new(shape, data))
    }

    #[test]
    fn schedules_are_variance_preserving_and_monotone() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1usize, 4, 16, 50, 64] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.alpha.len(), steps + 1);
                assert!(s.alpha[0] >= 1.0 - 1e-3);
                for t in 0..=steps {
                    let vp = s.alpha[t] * s.alpha[t] + s.sigma[t] * s.sigma[t];
                    assert!((vp - 1.0).abs() < 1e-6, "{kind:?} T={steps} t={t}: {vp}");
                    assert!(s.alpha[t] > 0.0);
                }
                for t in 1..=steps {
                    assert!(s.alpha[t] <= s.alpha[t - 1] + 1e-12);
                }
            }
        }
        assert!(make_schedule(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn linear_alpha_strictly_decreases() {
        let s = make_schedule(4, ScheduleKind::Linear).unwrap();
        for t in 1..=4 {
            assert!(s.alpha[t] < s.alpha[t - 1]);
        }
    }

    #[test]
    fn add_noise_is_the_exact_affine_rule() {
        let s = make_schedule(4, ScheduleKind::Linear).unwrap();
        let z0 = leaf(vec![2], vec![1.0, -2.0]);
        let eps = leaf(vec![2], vec![0.5, 0.25]);
        // t=0: alpha=1, sigma=0 -> z0 exactly.
        let out = add_noise(&z0, &eps, 0, &s).unwrap();
        assert_eq!(out.value().to_vec(), vec![1.0, -2.0]);
        // scalar arithmetic at an interior t.
        let t = 2;
        let out = add_noise(&z0, &eps, t, &s).unwrap();
        let want = s.alpha[t] * 1.0 + s.sigma[t] * 0.5;
        assert!((out.value().data()[0] - want).abs() < 1e-12);

        let bad = leaf(vec![3], vec![0.0; 3]);
        assert!(add_noise(&z0, &bad, 1, &s).is_err());
        assert!(add_noise(&z0, &eps, 5, &s).is_err());
    }

    #[test]
    fn pure_noise_level_returns_eps() {
        // A synthetic schedule entry with alpha ~ 0 must hand back eps.
        let mut s = make_schedule(2, ScheduleKind::Linear).unwrap();
        s.alpha[2] = 0.0;
        s.sigma[2] = 1.0;
        let z0 = leaf(vec![2], vec![3.0, 4.0]);
        let eps = leaf(vec![2], vec![0.5, -0.5]);
        let out = add_noise(&z0, &eps, 2, &s).unwrap();
        assert_eq!(out.value().to_vec(), vec![0.5, -0.5]);
    }

    #[test]
    fn ddim_inverts_known_corruption() {
        let s = make_schedule(8, ScheduleKind::Cosine).unwrap();
        let z0 = leaf(vec![4], vec![0.3, -1.1, 0.8, 2.0]);
        let eps = leaf(vec![4], vec![-0.4, 0.9, 0.1, -1.5]);
        let z_t = add_noise(&z0, &eps, 8, &s).unwrap();
        // Walking the whole chain with the true eps reconstructs z0.
        let mut z = z_t;
        for t in (1..=8).rev() {
            z = ddim_step(&z, &eps, t, t - 1, &s).unwrap();
        }
        for (a, b) in z.value().data().iter().zip(z0.value().data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_jump_to_zero_equals_z0_pred() {
        let s = make_schedule(6, ScheduleKind::Linear).unwrap();
        let z0 = leaf(vec![2], vec![1.25, -0.75]);
        let eps = leaf(vec![2], vec![0.6, 0.2]);
        let z_t = add_noise(&z0, &eps, 6, &s).unwrap();
        // alpha[0]=1, sigma[0]=0: the output is exactly z0_pred = z0.
        let out = ddim_step(&z_t, &eps, 6, 0, &s).unwrap();
        for (a, b) in out.value().data().iter().zip(z0.value().data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_step_is_deterministic_and_validates() {
        let s = make_schedule(4, ScheduleKind::Cosine).unwrap();
        let z = leaf(vec![2], vec![0.1, 0.2]);
        let e = leaf(vec![2], vec![0.3, -0.1]);
        let a = ddim_step(&z, &e, 3, 1, &s).unwrap();
        let b = ddim_step(&z, &e, 3, 1, &s).unwrap();
        assert_eq!(a.value().to_vec(), b.value().to_vec());

        assert!(ddim_step(&z, &e, 1, 1, &s).is_err());
        assert!(ddim_step(&z, &e, 1, 2, &s).is_err());
        let mut degenerate = s.clone();
        degenerate.alpha[3] = 0.0;
        assert!(matches!(
            ddim_step(&z, &e, 3, 1, &degenerate),
            Err(Error::NumericSingularity(_))
        ));
    }
}
