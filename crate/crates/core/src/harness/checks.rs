//! Initialization-independent invariant checks run by `diagnose` and
//! appended to every run summary.

use crate::error::Result;
use crate::nets::FakeScoreState;
use crate::numerics::{fd_check, MlpArch, MlpGrad, MlpParams, RngStream, Tensor2};
use crate::policy::{dmd_gradient_oracle, guidance, policy_grad_rdm, DmdItem, RsMode, TransitionSite};
use crate::rewards::{group_normalize, rdm_exact};
use crate::schedule::{coeffs, transition_sample};
use crate::teacher::GmmSpec;
use crate::trainer::{max_rel_gap, train_round, TrainConfig, TrainerState};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

const GRID_TRANSITIONS: [(f64, f64); 3] = [(1.0, 0.75), (0.75, 0.5), (0.5, 0.25)];

/// A random mixture, student, fake and one transition in dimension `d`.
pub struct EquivalenceInstance {
    pub teacher: GmmSpec,
    pub student: MlpParams,
    pub fake: FakeScoreState,
    pub site: TransitionSite,
    pub item: DmdItem,
}

impl EquivalenceInstance {
    pub fn random(rng: &mut RngStream, d: usize) -> Result<Self> {
        let k = 1 + rng.below(4);
        let means: Vec<Vec<f64>> = (0..k).map(|_| rng.randn(d).iter().map(|v| 2.0 * v).collect()).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.2, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let variances: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 0.5)).collect();
        let teacher = GmmSpec::new(weights, means, variances)?;
        let arch = MlpArch {
            data_dim: d,
            cond_dim: 1,
            hidden: 16,
            layers: 2,
            residual: true,
        };
        let student = MlpParams::init(arch, rng, 0.5)?;
        let fake = FakeScoreState::new(MlpParams::init(arch, rng, 0.5)?);
        let (t, t_next) = GRID_TRANSITIONS[rng.below(GRID_TRANSITIONS.len())];
        let x_t = rng.randn(d);
        let pred = student.forward(&x_t, t, 0)?;
        let (x_next, _) = transition_sample(&pred, t_next, &rng.randn(d))?;
        let tprime = rng.uniform_in(0.02, 0.98);
        let diffuse_noise = rng.randn(d);
        Ok(Self {
            teacher,
            student,
            fake,
            site: TransitionSite {
                x_t: x_t.clone(),
                t,
                t_next,
                cond: 0,
                x_next,
            },
            item: DmdItem {
                x_t,
                t,
                cond: 0,
                tprime,
                diffuse_noise,
            },
        })
    }

    /// `(policy gradient with the exact reward, direct matching loss gradient)`.
    pub fn gradients(&self, mode: RsMode) -> Result<(MlpGrad, MlpGrad)> {
        let pred = self.student.forward(&self.item.x_t, self.item.t, 0)?;
        let g = guidance(
            &pred,
            self.item.tprime,
            &self.item.diffuse_noise,
            0,
            &self.teacher,
            &self.fake,
            mode,
        )?;
        let mu: Vec<f64> = pred.iter().map(|v| (1.0 - self.site.t_next) * v).collect();
        let rdm = rdm_exact(
            &Tensor2::from_rows(&[g.rs])?,
            &Tensor2::from_rows(&[self.site.x_next.clone()])?,
            &Tensor2::from_rows(&[mu])?,
            &[coeffs(self.site.t_next)?],
        )?;
        let pg = policy_grad_rdm(&self.student, &[self.site.clone()], &rdm.values)?.grads;
        let oracle = dmd_gradient_oracle(&self.student, &self.teacher, &self.fake, &[self.item.clone()], mode, false)?;
        Ok((pg, oracle))
    }
}

/// Policy gradient with the exact reward against the negated direct gradient.
pub fn gradient_equivalence(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::new(seed, 11);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let d = [1, 2, 8][i % 3];
        let inst = EquivalenceInstance::random(&mut rng, d)?;
        let (pg, mut oracle) = inst.gradients(RsMode::Score)?;
        oracle.scale(-1.0);
        worst = worst.max(max_rel_gap(&pg, &oracle));
    }
    Ok(CheckResult {
        name: "gradient equivalence",
        passed: worst < 1e-6,
        detail: format!("{instances} instances, max relative error {worst:.3e}"),
    })
}

/// Analytic MLP gradients against central differences.
pub fn finite_difference(per_arch: usize, seed: u64) -> Result<CheckResult> {
    let archs = [(1, 0, false), (2, 2, true), (8, 1, true)];
    let mut rng = RngStream::new(seed, 12);
    let mut worst: f64 = 0.0;
    for (d, layers, residual) in archs {
        let arch = MlpArch {
            data_dim: d,
            cond_dim: 1,
            hidden: 32,
            layers,
            residual,
        };
        for _ in 0..per_arch {
            let p = MlpParams::init(arch, &mut rng, 1.0)?;
            let x = rng.randn(d);
            let t = rng.uniform();
            let up = rng.randn(d);
            worst = worst.max(fd_check(&p, &x, t, 0, &up, 1e-5)?);
        }
    }
    Ok(CheckResult {
        name: "finite differences",
        passed: worst < 1e-4,
        detail: format!("{} instances, max relative error {worst:.3e}", 3 * per_arch),
    })
}

/// Group statistics of normalized fields, including guarded columns.
pub fn group_norm_stats(fields: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::new(seed, 13);
    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    let mut guard_ok = true;
    for _ in 0..fields {
        let g = 2 + rng.below(15);
        let d = 1 + rng.below(8);
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let mut field = Tensor2::from_vec(g, d, rng.randn(g * d).iter().map(|v| v * scale).collect())?;
        let constant = rng.below(d + 1);
        if constant < d {
            let c = rng.normal();
            for r in 0..g {
                field.set(r, constant, c);
            }
        }
        let f = group_normalize(&field, 1e-8)?;
        for j in 0..d {
            let col: Vec<f64> = (0..g).map(|r| f.values.get(r, j)).collect();
            if f.guarded.contains(&j) {
                guard_ok &= col.iter().all(|v| *v == 0.0);
                continue;
            }
            let mean = col.iter().sum::<f64>() / g as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
            worst_mean = worst_mean.max(mean.abs());
            worst_std = worst_std.max((std - 1.0).abs());
        }
    }
    Ok(CheckResult {
        name: "group normalization",
        passed: worst_mean < 1e-10 && worst_std <= 1e-8 && guard_ok,
        detail: format!(
            "{fields} fields, max |mean| {worst_mean:.3e}, max |std - 1| {worst_std:.3e}, guarded zeros {}",
            if guard_ok { "exact" } else { "violated" }
        ),
    })
}

/// One round from `state` with verification on: the first inner update must
/// be unclipped and equal to the plain estimator.
pub fn on_policy(state: &TrainerState, cfg: &TrainConfig) -> Result<CheckResult> {
    let mut probe = state.clone();
    let cfg = TrainConfig {
        verify_on_policy: true,
        ..cfg.clone()
    };
    let r = train_round(&mut probe, &cfg)?;
    let gap = r.on_policy_gap.unwrap_or(f64::NAN);
    let passed = r.aborted.is_none() && r.first_clip_frac == 0.0 && gap < 1e-10;
    Ok(CheckResult {
        name: "on-policy reduction",
        passed,
        detail: format!("clip fraction {}, relative gap {gap:.3e}", r.first_clip_frac),
    })
}

/// The full suite. `state` is whatever the caller has (fresh or trained).
pub fn suite(state: &TrainerState, cfg: &TrainConfig, instances: usize) -> Result<Vec<CheckResult>> {
    Ok(vec![
        gradient_equivalence(instances, cfg.seed)?,
        finite_difference(instances.div_ceil(3).max(1), cfg.seed)?,
        group_norm_stats(instances, cfg.seed)?,
        on_policy(state, cfg)?,
    ])
}
