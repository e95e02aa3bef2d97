//! Analytic Gaussian-mixture teacher.
//!
//! Under the linear schedule the noisy marginal at time `t` is again a
//! mixture, with component `k` distributed as
//! `N(alpha * m_k, (alpha^2 v_k + sigma^2) I)`, so scores and posterior-mean
//! denoisers are available in closed form.

use crate::error::{check_len, Error, Result};
use crate::numerics::{sq_dist, RngStream};
use crate::schedule::{coeffs, ScheduleCoeffs};

/// Anything that maps a noisy sample at time `t` to an estimate of `x0`.
pub trait Denoiser {
    fn denoise(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// Isotropic Gaussian mixture in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        check_len("mixture means", k, means.len())?;
        check_len("mixture variances", k, variances.len())?;
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Domain("mixture dimension must be positive".into()));
        }
        for m in &means {
            check_len("mixture mean", dim, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("mixture mean".into()));
            }
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Domain("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("mixture variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    /// Means given as one flat list of `K * d` numbers.
    pub fn from_flat(weights: Vec<f64>, means: &[f64], variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() % k != 0 {
            return Err(Error::Domain(format!(
                "{} mean entries cannot be split across {k} components",
                means.len()
            )));
        }
        let d = means.len() / k;
        Self::new(weights, means.chunks(d).map(<[f64]>::to_vec).collect(), variances)
    }

    /// `k` equal-weight components evenly spaced on a circle in the plane.
    pub fn ring(k: usize, radius: f64, variance: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("ring needs at least one component".into()));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![variance; k])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            out.iter_mut().zip(m).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    pub fn sample_component(&self, rng: &mut RngStream) -> (usize, Vec<f64>) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let s = self.variances[k].sqrt();
        let x = self.means[k].iter().map(|m| m + s * rng.normal()).collect();
        (k, x)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.sample_component(rng).1
    }

    pub fn sample_n(&self, rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Per-component noisy variances `alpha^2 v_k + sigma^2` and the
    /// log joint terms `log pi_k + log N(x; alpha m_k, s_k^2 I)`.
    fn component_terms(&self, x: &[f64], c: ScheduleCoeffs) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        check_len("mixture query", self.dim, x.len())?;
        let t = c.t;
        let d = self.dim as f64;
        let mut var = Vec::with_capacity(self.weights.len());
        let mut logs = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let s2 = c.alpha * c.alpha * self.variances[k] + c.sigma * c.sigma;
            if !(s2 > 0.0) {
                return Err(Error::Degenerate(format!("component {k} has zero variance at t={t}")));
            }
            let dist: f64 = x
                .iter()
                .zip(&self.means[k])
                .map(|(xi, mi)| (xi - c.alpha * mi).powi(2))
                .sum();
            logs.push(
                self.weights[k].ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
                    - dist / (2.0 * s2),
            );
            var.push(s2);
        }
        Ok((var, logs, c.alpha))
    }

    pub fn noisy_log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        let (_, logs, _) = self.component_terms(x, coeffs(t)?)?;
        Ok(log_sum_exp(&logs))
    }

    /// Posterior component probabilities given a noisy sample.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (_, logs, _) = self.component_terms(x, coeffs(t)?)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn log_responsibility(&self, x: &[f64], t: f64, k: usize) -> Result<f64> {
        if k >= self.weights.len() {
            return Err(Error::Domain(format!("component {k} out of range")));
        }
        let (_, logs, _) = self.component_terms(x, coeffs(t)?)?;
        Ok(logs[k] - log_sum_exp(&logs))
    }

    /// Score of the noisy marginal, `grad_x log p_t(x)`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.score_with(x, coeffs(t)?)
    }

    /// Score for arbitrary `(alpha, sigma)`, not tied to the linear schedule.
    pub fn score_with(&self, x: &[f64], c: ScheduleCoeffs) -> Result<Vec<f64>> {
        let (var, logs, alpha) = self.component_terms(x, c)?;
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for k in 0..self.weights.len() {
            let r = (logs[k] - lse).exp();
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&self.means[k])) {
                *o += r * (alpha * mi - xi) / var[k];
            }
        }
        Ok(out)
    }

    /// Tweedie posterior mean `E[x0 | x_t] = (x + sigma^2 * score) / alpha`.
    pub fn posterior_mean(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.posterior_mean_with(x, coeffs(t)?)
    }

    pub fn posterior_mean_with(&self, x: &[f64], c: ScheduleCoeffs) -> Result<Vec<f64>> {
        if !(c.alpha > 0.0) {
            return Err(Error::Domain(format!(
                "posterior mean undefined at t={} (alpha = 0)",
                c.t
            )));
        }
        let s = self.score_with(x, c)?;
        Ok(x.iter()
            .zip(&s)
            .map(|(xi, si)| (xi + c.sigma * c.sigma * si) / c.alpha)
            .collect())
    }

    /// Index of the nearest mean under each component's isotropic variance.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, (m, v)) in self.means.iter().zip(&self.variances).enumerate() {
            let d = sq_dist(x, m) / v;
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

impl Denoiser for GmmSpec {
    fn denoise(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.posterior_mean(x, t)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard() -> GmmSpec {
        GmmSpec::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GmmSpec::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GmmSpec::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GmmSpec::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        assert!(GmmSpec::from_flat(vec![0.5, 0.5], &[0.0, 1.0, 2.0], vec![1.0, 1.0]).is_err());
        let g = GmmSpec::from_flat(vec![0.5, 0.5], &[0.0, 1.0, 2.0, 3.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(g.means()[1], vec![2.0, 3.0]);
        let ring = GmmSpec::ring(8, 4.0, 0.05).unwrap();
        assert!((ring.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_variance_coefficients() {
        let g = standard();
        let c = ScheduleCoeffs {
            t: 0.8,
            alpha: 0.6,
            sigma: 0.8,
        };
        assert_eq!(g.score_with(&[1.0, 1.0], c).unwrap(), vec![-1.0, -1.0]);
        let d = g.posterior_mean_with(&[1.0, 1.0], c).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_score_and_denoiser() {
        let g = standard();
        let t = 0.4;
        let c = coeffs(t).unwrap();
        let s2 = c.alpha * c.alpha + c.sigma * c.sigma;
        let s = g.score(&[1.0, 1.0], t).unwrap();
        assert!((s[0] + 1.0 / s2).abs() < 1e-12);
        let d = g.posterior_mean(&[1.0, 1.0], t).unwrap();
        assert!((d[0] - c.alpha / s2).abs() < 1e-12);
    }

    #[test]
    fn symmetric_midpoint_has_zero_score() {
        let g = GmmSpec::new(
            vec![0.5, 0.5],
            vec![vec![-2.0, 1.0], vec![2.0, -1.0]],
            vec![0.3, 0.3],
        )
        .unwrap();
        let s = g.score(&[0.0, 0.0], 0.3).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn denoiser_rejects_alpha_zero() {
        assert!(standard().posterior_mean(&[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn near_degenerate_component_samples() {
        let g = GmmSpec::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1e-8]).unwrap();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..1000 {
            let x = g.sample(&mut rng);
            assert!(x.iter().all(|v| v.abs() < 1e-3));
        }
    }

    #[test]
    fn nearest_component_uses_variance() {
        let g = GmmSpec::new(vec![0.5, 0.5], vec![vec![0.0], vec![3.0]], vec![4.0, 0.01]).unwrap();
        assert_eq!(g.nearest_component(&[1.4]), 0);
        assert_eq!(g.nearest_component(&[2.9]), 1);
    }
}
