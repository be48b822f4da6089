use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear beta ramp. `alpha_bar[t]` for `t` in `0..=T`, with
/// `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        ensure!(
            t >= 2 && 0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0,
            Error::Config {
                key: "schedule".into(),
                message: format!(
                    "need steps >= 2 and 0 < beta_start < beta_end < 1, got {} / {} / {}",
                    t, cfg.beta_start, cfg.beta_end
                ),
            }
        );
        let betas: Vec<f64> = (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            t <= self.len(),
            Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.len()))
        );
        Ok(())
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        ensure!(
            x0.len() == eps.len(),
            Error::ShapeMismatch(format!("x0 has {} values, eps {}", x0.len(), eps.len()))
        );
        if t == 0 {
            return Ok(x0.to_vec());
        }
        let a = self.alpha_bar[t].sqrt();
        let s = (1.0 - self.alpha_bar[t]).sqrt();
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
            .collect())
    }

    /// `steps` timesteps evenly spread over `1..=T`, in descending order.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        ensure!(
            (1..=t).contains(&steps),
            Error::InvalidArgument(format!("sampling steps {steps} outside 1..={t}"))
        );
        let mut ts: Vec<usize> = (1..=steps).map(|i| ((i * t) as f64 / steps as f64).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }

    /// One deterministic DDIM update from `t` to `t_prev` given the clamped
    /// clean prediction.
    pub fn ddim_step(&self, x_t: &[f32], x0: &[f32], t: usize, t_prev: usize) -> Result<Vec<f32>> {
        self.check_t(t)?;
        self.check_t(t_prev)?;
        ensure!(
            t_prev < t,
            Error::InvalidArgument(format!("DDIM step must go backwards, {t} -> {t_prev}"))
        );
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(x_t
            .iter()
            .zip(x0)
            .map(|(&x, &x0)| {
                let eps = (x as f64 - sa * x0 as f64) / sn;
                (pa * x0 as f64 + pn * eps) as f32
            })
            .collect())
    }
}

pub fn gaussian(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
