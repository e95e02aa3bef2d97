//! Rectified-flow noise schedule, forward diffusion, and the student's
//! Gaussian transition kernel.

use crate::error::{check_len, Error, Result};

/// Noise-schedule coefficients at one time, `x_t = alpha * x0 + sigma * eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleCoeffs {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Linear schedule: `alpha = 1 - t`, `sigma = t`.
pub fn coeffs(t: f64) -> Result<ScheduleCoeffs> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    Ok(ScheduleCoeffs {
        t,
        alpha: 1.0 - t,
        sigma: t,
    })
}

/// Generator timesteps `t_T > ... > t_0 = 0` plus the diffused-timestep range.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    steps: Vec<f64>,
    pub tprime_min: f64,
    pub tprime_max: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            steps: vec![1.0, 0.75, 0.5, 0.25, 0.0],
            tprime_min: 0.02,
            tprime_max: 0.98,
        }
    }
}

impl TimeGrid {
    pub fn new(steps: Vec<f64>, tprime_min: f64, tprime_max: f64) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::Domain("time grid needs at least one transition".into()));
        }
        if steps[0] != 1.0 || *steps.last().unwrap() != 0.0 {
            return Err(Error::Domain("time grid must run from 1 down to 0".into()));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("time grid must be strictly decreasing".into()));
        }
        if !(0.0 < tprime_min && tprime_min < tprime_max && tprime_max < 1.0) {
            return Err(Error::Domain(format!(
                "diffused range [{tprime_min}, {tprime_max}] must lie inside (0, 1)"
            )));
        }
        Ok(Self {
            steps,
            tprime_min,
            tprime_max,
        })
    }

    /// Evenly spaced grid with `n` transitions.
    pub fn uniform(n: usize, tprime_min: f64, tprime_max: f64) -> Result<Self> {
        let steps = (0..=n).map(|i| 1.0 - i as f64 / n as f64).collect();
        Self::new(steps, tprime_min, tprime_max)
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Number of transitions `T`.
    pub fn num_transitions(&self) -> usize {
        self.steps.len() - 1
    }

    /// Transitions with `t_next > 0`; the last one is a deterministic denoise.
    pub fn num_stochastic(&self) -> usize {
        self.num_transitions() - 1
    }

    /// `(t, t_next)` of transition `i`, counted from pure noise.
    pub fn transition(&self, i: usize) -> (f64, f64) {
        (self.steps[i], self.steps[i + 1])
    }
}

pub fn forward_diffuse(x0: &[f64], tprime: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_len("forward_diffuse noise", x0.len(), noise.len())?;
    let c = coeffs(tprime)?;
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(x, n)| c.alpha * x + c.sigma * n)
        .collect())
}

/// Draws `x_next ~ N(alpha(t_next) * mean_x0, sigma(t_next)^2 I)` with the
/// given standard-normal noise; returns `(x_next, mu)`.
pub fn transition_sample(mean_x0: &[f64], t_next: f64, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("transition noise", mean_x0.len(), noise.len())?;
    let c = coeffs(t_next)?;
    let mu: Vec<f64> = mean_x0.iter().map(|x| c.alpha * x).collect();
    let x_next = mu.iter().zip(noise).map(|(m, n)| m + c.sigma * n).collect();
    Ok((x_next, mu))
}

pub fn transition_logprob_per_dim(x_next: &[f64], mu: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_len("transition logprob", x_next.len(), mu.len())?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!("sigma = {sigma}")));
    }
    let norm = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(x_next
        .iter()
        .zip(mu)
        .map(|(x, m)| norm - (x - m) * (x - m) * inv)
        .collect())
}

/// Per-dimension `d log p / d mu`, i.e. `(x_next - mu) / sigma^2`.
pub fn logprob_grad_mu(x_next: &[f64], mu: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_len("transition logprob", x_next.len(), mu.len())?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!("sigma = {sigma}")));
    }
    let inv = 1.0 / (sigma * sigma);
    Ok(x_next.iter().zip(mu).map(|(x, m)| (x - m) * inv).collect())
}
