//! Policy-gradient estimators over the student's Gaussian transitions, and
//! the direct distribution-matching gradient they are checked against.
//!
//! Every estimator returns the gradient of an objective to be *maximized*;
//! [`dmd_gradient_oracle`] returns the gradient of a loss to be minimized.

use crate::error::{check_len, Error, Result};
use crate::nets::FakeScoreState;
use crate::numerics::{l1, MlpGrad, MlpParams, Tensor2};
use crate::schedule::{coeffs, forward_diffuse, logprob_grad_mu, transition_logprob_per_dim};
use crate::teacher::GmmSpec;
use crate::trainer::Trajectory;

/// One recorded transition `x_t -> x_next` of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSite {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub t_next: f64,
    pub cond: usize,
    pub x_next: Vec<f64>,
}

/// Inputs of one distribution-matching gradient sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DmdItem {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub cond: usize,
    pub tprime: f64,
    pub diffuse_noise: Vec<f64>,
}

/// Units of the guidance term `R_s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RsMode {
    /// `mu_real(x_t') - mu_fake(x_t')`, clean-sample units.
    Denoiser,
    /// `s_real(x_t') - s_fake(x_t')`, score units.
    Score,
}

/// Per-dimension or per-sample likelihood ratios in the clipped surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioMode {
    PerDim,
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrpoConfig {
    /// Clip range.
    pub eta: f64,
    /// Generator updates per sampling round.
    pub inner_updates: usize,
    pub ratio_mode: RatioMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            inner_updates: 1,
            ratio_mode: RatioMode::PerDim,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("clip range eta must be positive"));
        }
        if self.inner_updates == 0 {
            return Err(Error::config("inner updates must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PolicyGradEstimate {
    pub grads: MlpGrad,
    pub value: f64,
    pub ratio_mean: f64,
    pub clip_frac: f64,
}

/// Intermediate quantities of one reward evaluation.
#[derive(Clone, Debug)]
pub struct RsSample {
    pub pred_x0: Vec<f64>,
    pub noisy: Vec<f64>,
    pub teacher_x0: Vec<f64>,
    pub fake_x0: Vec<f64>,
    pub rs: Vec<f64>,
}

/// Re-noises `pred_x0` at `t'` and evaluates the teacher and fake there.
pub fn guidance(
    pred_x0: &[f64],
    tprime: f64,
    diffuse_noise: &[f64],
    cond: usize,
    teacher: &GmmSpec,
    fake: &FakeScoreState,
    mode: RsMode,
) -> Result<RsSample> {
    let noisy = forward_diffuse(pred_x0, tprime, diffuse_noise)?;
    let teacher_x0 = teacher.posterior_mean(&noisy, tprime)?;
    let fake_x0 = fake.fake_denoise(&noisy, tprime, cond)?;
    let rs = match mode {
        RsMode::Denoiser => teacher_x0.iter().zip(&fake_x0).map(|(a, b)| a - b).collect(),
        RsMode::Score => {
            let c = coeffs(tprime)?;
            let s_real = teacher.score(&noisy, tprime)?;
            let inv = 1.0 / (c.sigma * c.sigma);
            s_real
                .iter()
                .zip(&fake_x0)
                .zip(&noisy)
                .map(|((s, f), x)| s - (c.alpha * f - x) * inv)
                .collect()
        }
    };
    Ok(RsSample {
        pred_x0: pred_x0.to_vec(),
        noisy,
        teacher_x0,
        fake_x0,
        rs,
    })
}

/// `-mean_i (R_s,i . grad_theta G_theta(x_t,i))` given precomputed guidance rows.
pub fn dmd_gradient_from_rs(student: &MlpParams, items: &[DmdItem], rs: &Tensor2) -> Result<MlpGrad> {
    check_len("dmd gradient rows", items.len(), rs.rows())?;
    let mut grad = MlpGrad::zeros(student.arch());
    if items.is_empty() {
        return Ok(grad);
    }
    let inv = 1.0 / items.len() as f64;
    for (i, it) in items.iter().enumerate() {
        let trace = student.forward_trace(&it.x_t, it.t, it.cond)?;
        let upstream: Vec<f64> = rs.row(i).iter().map(|v| -v * inv).collect();
        student.backward_into(&trace, &upstream, &mut grad)?;
    }
    Ok(grad)
}

/// Direct distribution-matching loss gradient. With `weighting`, each
/// sample's `R_s` is scaled by `d / ||mu_real - pred_x0||_1`.
pub fn dmd_gradient_oracle(
    student: &MlpParams,
    teacher: &GmmSpec,
    fake: &FakeScoreState,
    items: &[DmdItem],
    mode: RsMode,
    weighting: bool,
) -> Result<MlpGrad> {
    let d = student.arch().data_dim;
    let mut rows = Vec::with_capacity(items.len());
    for it in items {
        let pred = student.forward(&it.x_t, it.t, it.cond)?;
        let g = guidance(&pred, it.tprime, &it.diffuse_noise, it.cond, teacher, fake, mode)?;
        let scale = if weighting {
            let norm: f64 = l1(&crate::numerics::sub(&g.teacher_x0, &pred));
            d as f64 / norm.max(crate::rewards::RDM_NORM_FLOOR)
        } else {
            1.0
        };
        rows.push(g.rs.iter().map(|v| v * scale).collect());
    }
    let rs = Tensor2::from_rows(&rows)?;
    dmd_gradient_from_rs(student, items, &rs)
}

struct SiteEval {
    trace: crate::numerics::Trace,
    mu: Vec<f64>,
    alpha: f64,
    sigma: f64,
    logp: Vec<f64>,
}

fn eval_site(params: &MlpParams, s: &TransitionSite) -> Result<SiteEval> {
    let c = coeffs(s.t_next)?;
    if !(c.sigma > 0.0) {
        return Err(Error::Degenerate(format!(
            "transition to t = {} has no density",
            s.t_next
        )));
    }
    let trace = params.forward_trace(&s.x_t, s.t, s.cond)?;
    let mu: Vec<f64> = trace.output.iter().map(|v| c.alpha * v).collect();
    let logp = transition_logprob_per_dim(&s.x_next, &mu, c.sigma)?;
    Ok(SiteEval {
        trace,
        mu,
        alpha: c.alpha,
        sigma: c.sigma,
        logp,
    })
}

/// `d log p[k] / d G[k]` for the site's transition.
fn logp_grad_pred(e: &SiteEval, x_next: &[f64]) -> Result<Vec<f64>> {
    Ok(logprob_grad_mu(x_next, &e.mu, e.sigma)?
        .into_iter()
        .map(|g| g * e.alpha)
        .collect())
}

/// REINFORCE with a dense per-dimension reward:
/// `mean_i sum_k R[i,k] grad log p_theta(x_next[i,k] | x_t[i])`.
pub fn policy_grad_rdm(student: &MlpParams, sites: &[TransitionSite], rdm: &Tensor2) -> Result<PolicyGradEstimate> {
    check_len("policy gradient rows", sites.len(), rdm.rows())?;
    let mut grad = MlpGrad::zeros(student.arch());
    let mut value = 0.0;
    if sites.is_empty() {
        return Ok(PolicyGradEstimate {
            grads: grad,
            value,
            ratio_mean: 1.0,
            clip_frac: 0.0,
        });
    }
    let inv = 1.0 / sites.len() as f64;
    for (i, s) in sites.iter().enumerate() {
        let e = eval_site(student, s)?;
        let dlogp = logp_grad_pred(&e, &s.x_next)?;
        let r = rdm.row(i);
        let upstream: Vec<f64> = r.iter().zip(&dlogp).map(|(a, g)| a * g * inv).collect();
        value += inv * r.iter().zip(&e.logp).map(|(a, l)| a * l).sum::<f64>();
        student.backward_into(&e.trace, &upstream, &mut grad)?;
    }
    Ok(PolicyGradEstimate {
        grads: grad,
        value,
        ratio_mean: 1.0,
        clip_frac: 0.0,
    })
}

/// Clipped importance-sampling surrogate
/// `mean_{i,k} min(r A, clip(r, 1 - eta, 1 + eta) A)` and its gradient.
/// Advantages are constants; ratios compare `params` against `old`.
pub fn grpo_surrogate(
    params: &MlpParams,
    old: &MlpParams,
    sites: &[TransitionSite],
    a_sum: &Tensor2,
    cfg: &GrpoConfig,
) -> Result<PolicyGradEstimate> {
    cfg.validate()?;
    check_len("surrogate rows", sites.len(), a_sum.rows())?;
    let d = params.arch().data_dim;
    check_len("surrogate columns", d, a_sum.cols())?;
    let mut grad = MlpGrad::zeros(params.arch());
    if sites.is_empty() {
        return Ok(PolicyGradEstimate {
            grads: grad,
            value: 0.0,
            ratio_mean: 1.0,
            clip_frac: 0.0,
        });
    }
    let scale = 1.0 / (sites.len() * d) as f64;
    let (lo, hi) = (1.0 - cfg.eta, 1.0 + cfg.eta);
    let mut value = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    let mut clipped = 0usize;

    for (i, s) in sites.iter().enumerate() {
        let cur = eval_site(params, s)?;
        let prev = eval_site(old, s)?;
        let dlogp = logp_grad_pred(&cur, &s.x_next)?;
        let adv = a_sum.row(i);
        let mut upstream = vec![0.0; d];
        match cfg.ratio_mode {
            RatioMode::PerDim => {
                for k in 0..d {
                    let r = (cur.logp[k] - prev.logp[k]).exp();
                    if !r.is_finite() {
                        return Err(Error::NonFinite("likelihood ratio".into()));
                    }
                    ratio_sum += r;
                    ratio_count += 1;
                    let unclipped = r * adv[k];
                    let clip = r.clamp(lo, hi) * adv[k];
                    if unclipped <= clip {
                        value += scale * unclipped;
                        upstream[k] = scale * adv[k] * r * dlogp[k];
                    } else {
                        value += scale * clip;
                        clipped += 1;
                    }
                }
            }
            RatioMode::PerSample => {
                let log_r: f64 = cur.logp.iter().zip(&prev.logp).map(|(a, b)| a - b).sum();
                let r = log_r.exp();
                if !r.is_finite() {
                    return Err(Error::NonFinite("likelihood ratio".into()));
                }
                ratio_sum += r;
                ratio_count += 1;
                let mut active_adv = 0.0;
                for &a in adv {
                    let unclipped = r * a;
                    let clip = r.clamp(lo, hi) * a;
                    if unclipped <= clip {
                        value += scale * unclipped;
                        active_adv += a;
                    } else {
                        value += scale * clip;
                        clipped += 1;
                    }
                }
                for k in 0..d {
                    upstream[k] = scale * active_adv * r * dlogp[k];
                }
            }
        }
        params.backward_into(&cur.trace, &upstream, &mut grad)?;
    }
    Ok(PolicyGradEstimate {
        grads: grad,
        value,
        ratio_mean: ratio_sum / ratio_count as f64,
        clip_frac: clipped as f64 / (sites.len() * d) as f64,
    })
}

/// Full-trajectory REINFORCE with a terminal reward per trajectory:
/// `mean_i r_i sum_t grad log p(x_{t-1} | x_t)` over stochastic steps.
/// With `old`, each step term is weighted by its likelihood ratio.
pub fn ddpo_full_trajectory(
    params: &MlpParams,
    trajectories: &[Trajectory],
    rewards: &[f64],
    old: Option<&MlpParams>,
) -> Result<PolicyGradEstimate> {
    check_len("trajectory rewards", trajectories.len(), rewards.len())?;
    let mut grad = MlpGrad::zeros(params.arch());
    let mut value = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    if trajectories.is_empty() {
        return Ok(PolicyGradEstimate {
            grads: grad,
            value,
            ratio_mean: 1.0,
            clip_frac: 0.0,
        });
    }
    let inv = 1.0 / trajectories.len() as f64;
    for (traj, &r) in trajectories.iter().zip(rewards) {
        for site in traj.stochastic_sites() {
            let cur = eval_site(params, &site)?;
            let ratio = match old {
                Some(o) => {
                    let prev = eval_site(o, &site)?;
                    cur.logp.iter().zip(&prev.logp).map(|(a, b)| a - b).sum::<f64>().exp()
                }
                None => 1.0,
            };
            ratio_sum += ratio;
            ratio_count += 1;
            let dlogp = logp_grad_pred(&cur, &site.x_next)?;
            let upstream: Vec<f64> = dlogp.iter().map(|g| inv * r * ratio * g).collect();
            value += inv * r * ratio * cur.logp.iter().sum::<f64>();
            params.backward_into(&cur.trace, &upstream, &mut grad)?;
        }
    }
    Ok(PolicyGradEstimate {
        grads: grad,
        value,
        ratio_mean: if ratio_count > 0 { ratio_sum / ratio_count as f64 } else { 1.0 },
        clip_frac: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{MlpArch, RngStream};

    fn small() -> MlpArch {
        MlpArch {
            data_dim: 2,
            cond_dim: 1,
            hidden: 12,
            layers: 2,
            residual: true,
        }
    }

    fn random_sites(rng: &mut RngStream, params: &MlpParams, n: usize) -> Vec<TransitionSite> {
        (0..n)
            .map(|_| {
                let x_t = rng.randn(2);
                let (t, t_next) = [(1.0, 0.75), (0.75, 0.5), (0.5, 0.25)][rng.below(3)];
                let pred = params.forward(&x_t, t, 0).unwrap();
                let (x_next, _) =
                    crate::schedule::transition_sample(&pred, t_next, &rng.randn(2)).unwrap();
                TransitionSite {
                    x_t,
                    t,
                    t_next,
                    cond: 0,
                    x_next,
                }
            })
            .collect()
    }

    #[test]
    fn clip_arithmetic() {
        // single-parameter-free check of the min/clip branch selection
        let eta = 0.5;
        let term = |r: f64, a: f64| (r * a).min(r.clamp(1.0 - eta, 1.0 + eta) * a);
        assert_eq!(term(2.0, 1.0), 1.5);
        assert_eq!(term(0.2, -1.0), -0.5);
    }

    #[test]
    fn zero_rewards_zero_gradient() {
        let mut rng = RngStream::new(1, 0);
        let p = MlpParams::init(small(), &mut rng, 0.3).unwrap();
        let sites = random_sites(&mut rng, &p, 5);
        let est = policy_grad_rdm(&p, &sites, &Tensor2::zeros(5, 2)).unwrap();
        assert!(est.grads.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn policy_grad_is_linear_in_reward() {
        let mut rng = RngStream::new(2, 0);
        let p = MlpParams::init(small(), &mut rng, 0.3).unwrap();
        let sites = random_sites(&mut rng, &p, 4);
        let r = Tensor2::from_vec(4, 2, rng.randn(8)).unwrap();
        let g1 = policy_grad_rdm(&p, &sites, &r).unwrap();
        let g2 = policy_grad_rdm(&p, &sites, &r.map(|v| 2.0 * v)).unwrap();
        for (a, b) in g1.grads.values().iter().zip(g2.grads.values()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn on_policy_surrogate_is_reinforce() {
        let mut rng = RngStream::new(3, 0);
        let p = MlpParams::init(small(), &mut rng, 0.3).unwrap();
        let sites = random_sites(&mut rng, &p, 6);
        let a = Tensor2::from_vec(6, 2, rng.randn(12)).unwrap();
        // a per-sample ratio couples dimensions: its reference reward is the
        // row sum broadcast over the row
        let row_sums = Tensor2::from_rows(
            &(0..6)
                .map(|i| vec![a.row(i).iter().sum::<f64>(); 2])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for (mode, reference) in [(RatioMode::PerDim, &a), (RatioMode::PerSample, &row_sums)] {
            let cfg = GrpoConfig {
                ratio_mode: mode,
                ..GrpoConfig::default()
            };
            let est = grpo_surrogate(&p, &p, &sites, &a, &cfg).unwrap();
            assert_eq!(est.clip_frac, 0.0);
            assert!((est.ratio_mean - 1.0).abs() < 1e-15);
            let mut plain = policy_grad_rdm(&p, &sites, reference).unwrap().grads;
            plain.scale(0.5);
            for (x, y) in est.grads.values().iter().zip(plain.values()) {
                assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-12), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn final_deterministic_step_is_rejected() {
        let mut rng = RngStream::new(4, 0);
        let p = MlpParams::init(small(), &mut rng, 0.3).unwrap();
        let site = TransitionSite {
            x_t: vec![0.1, 0.2],
            t: 0.25,
            t_next: 0.0,
            cond: 0,
            x_next: vec![0.1, 0.2],
        };
        let a = Tensor2::zeros(1, 2);
        assert!(grpo_surrogate(&p, &p, &[site.clone()], &a, &GrpoConfig::default()).is_err());
        assert!(policy_grad_rdm(&p, &[site], &a).is_err());
    }

    #[test]
    fn tighter_clip_lowers_surrogate_for_positive_advantages() {
        let mut rng = RngStream::new(5, 0);
        let old = MlpParams::init(small(), &mut rng, 0.3).unwrap();
        let sites = random_sites(&mut rng, &old, 8);
        let a = Tensor2::filled(8, 2, 1.0);
        // move params so that some ratios exceed 1
        let est = grpo_surrogate(&old, &old, &sites, &a, &GrpoConfig::default()).unwrap();
        let mut new = old.clone();
        for (p, g) in new.values_mut().iter_mut().zip(est.grads.values()) {
            *p += 50.0 * g;
        }
        let mut prev = f64::INFINITY;
        for eta in [2.0, 1.0, 0.5, 0.2, 0.05] {
            let cfg = GrpoConfig {
                eta,
                ..GrpoConfig::default()
            };
            let v = grpo_surrogate(&new, &old, &sites, &a, &cfg).unwrap().value;
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }
}
