//! The training loop: trajectory sampling, fake denoiser updates, reward and
//! advantage computation per group, and clipped generator updates.

use std::io::{BufRead, Write};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{mode_coverage, EnergyReference, MetricsRow};
use crate::nets::{
    adam_step, clip_grad_norm, read_checkpoint, write_checkpoint, AdamConfig, DenoiseSample,
    FakeScoreState, StepOutcome, StudentState,
};
use crate::numerics::{MlpArch, MlpGrad, MlpParams, RngStream, Tensor2};
use crate::policy::{
    grpo_surrogate, guidance, policy_grad_rdm, GrpoConfig, RatioMode, RsMode, TransitionSite,
};
use crate::rewards::{
    group_normalize, rdm_exact, rdm_practice, wdm_weight, weighted_add, AdvantageField, BetaMode,
    BetaWeights, ExternalReward,
};
use crate::schedule::{coeffs, transition_sample, ScheduleCoeffs, TimeGrid};
use crate::teacher::GmmSpec;

const PURPOSE_INIT: u64 = 1;
const PURPOSE_SAMPLE: u64 = 2;
const PURPOSE_FAKE: u64 = 3;
const PURPOSE_REWARD: u64 = 4;
const PURPOSE_EVAL: u64 = 5;
const PURPOSE_TEACHER_EVAL: u64 = 6;
const PURPOSE_PRETRAIN: u64 = 7;
const PURPOSE_TEACHER_FIT: u64 = 8;

/// Which reward construction feeds the distribution-matching advantage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdmMode {
    /// Sign-normalized reward with the amplitude weight applied afterwards.
    Practice,
    /// Reward whose policy gradient equals the direct matching gradient.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub reward: ExternalReward,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub teacher: GmmSpec,
    pub grid: TimeGrid,
    /// `t'` range for reward computation; the fake denoiser always trains
    /// on the grid's full range.
    pub reward_tprime: (f64, f64),
    pub groups: usize,
    pub group_size: usize,
    pub iterations: usize,
    /// Rounds with auxiliary weights forced to 0.
    pub warmup: usize,
    pub rewards: Vec<RewardSpec>,
    pub grpo: GrpoConfig,
    pub gn: bool,
    pub gn_eps: f64,
    pub share_t: bool,
    pub share_tprime: bool,
    pub beta_mode: BetaMode,
    pub shared_noise_init: bool,
    pub rdm_mode: RdmMode,
    pub rs_mode: RsMode,
    pub student_opt: AdamConfig,
    pub fake_opt: AdamConfig,
    pub grad_clip: f64,
    pub hidden: usize,
    pub layers: usize,
    pub init_scale: f64,
    /// Regression steps fitting the student to the teacher denoiser before
    /// training; the fake starts as a copy of the fitted student.
    pub teacher_fit: usize,
    pub teacher_fit_batch: usize,
    pub teacher_fit_opt: AdamConfig,
    /// Fake denoiser steps on the initial student before round 0.
    pub fake_pretrain: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub teacher_samples: usize,
    /// 0 disables checkpoints; otherwise a multiple of `eval_every`.
    pub checkpoint_every: usize,
    pub wall_clock: bool,
    /// Recompute the plain estimator on every first inner update.
    pub verify_on_policy: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Ring-teacher defaults.
    pub fn ring_default() -> Self {
        let grid = TimeGrid::default();
        Self {
            teacher: GmmSpec::ring(8, 4.0, 0.05).expect("valid ring"),
            reward_tprime: (grid.tprime_min, grid.tprime_max),
            grid,
            groups: 4,
            group_size: 8,
            iterations: 3000,
            warmup: 500,
            rewards: Vec::new(),
            grpo: GrpoConfig::default(),
            gn: true,
            gn_eps: 1e-8,
            share_t: true,
            share_tprime: true,
            beta_mode: BetaMode::Sample,
            shared_noise_init: true,
            rdm_mode: RdmMode::Practice,
            rs_mode: RsMode::Denoiser,
            student_opt: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            fake_opt: AdamConfig::default(),
            grad_clip: 1.0,
            hidden: 64,
            layers: 2,
            init_scale: 1e-2,
            teacher_fit: 2000,
            teacher_fit_batch: 64,
            teacher_fit_opt: AdamConfig::default(),
            fake_pretrain: 0,
            eval_every: 100,
            eval_samples: 4096,
            teacher_samples: 4096,
            checkpoint_every: 0,
            wall_clock: false,
            verify_on_policy: false,
            seed: 0,
        }
    }

    pub fn arch(&self) -> MlpArch {
        MlpArch {
            data_dim: self.teacher.dim(),
            cond_dim: 1,
            hidden: self.hidden,
            layers: self.layers,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("groups", self.groups),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
            ("teacher_samples", self.teacher_samples),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if self.eval_samples < 2 || self.teacher_samples < 2 {
            return Err(Error::config("evaluation needs at least 2 samples"));
        }
        if self.checkpoint_every % self.eval_every != 0 {
            return Err(Error::config("checkpoint_every must be a multiple of eval_every"));
        }
        let (lo, hi) = self.reward_tprime;
        if !(self.grid.tprime_min <= lo && lo < hi && hi <= self.grid.tprime_max) {
            return Err(Error::config(format!(
                "reward t' range [{lo}, {hi}] must lie inside [{}, {}]",
                self.grid.tprime_min, self.grid.tprime_max
            )));
        }
        if self.grid.num_stochastic() == 0 {
            return Err(Error::config("time grid has no stochastic transition"));
        }
        if !(self.grad_clip > 0.0) || !(self.gn_eps >= 0.0) {
            return Err(Error::config("grad_clip must be positive and gn_eps non-negative"));
        }
        for r in &self.rewards {
            if !r.weight.is_finite() {
                return Err(Error::config("reward weights must be finite"));
            }
            r.reward.eval(&self.teacher.mean(), &self.teacher)?;
        }
        self.grpo.validate()
    }

    fn aux_weight(&self, round: usize, w: f64) -> f64 {
        if round < self.warmup {
            0.0
        } else {
            w
        }
    }
}

/// One backward simulation from `t = 1` to `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub cond: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Transition noises; zero for the deterministic final step.
    pub noises: Vec<Vec<f64>>,
    pub mus: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub preds: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn num_transitions(&self) -> usize {
        self.times.len() - 1
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn site(&self, i: usize) -> TransitionSite {
        TransitionSite {
            x_t: self.states[i].clone(),
            t: self.times[i],
            t_next: self.times[i + 1],
            cond: self.cond,
            x_next: self.states[i + 1].clone(),
        }
    }

    /// Transitions with a density (`sigma(t_next) > 0`).
    pub fn stochastic_sites(&self) -> Vec<TransitionSite> {
        (0..self.num_transitions())
            .filter(|&i| self.sigmas[i] > 0.0)
            .map(|i| self.site(i))
            .collect()
    }
}

/// Runs the student from `x_init` at `t = 1`, drawing transition noise from
/// `rng` for every stochastic step.
pub fn sample_trajectory(
    student: &MlpParams,
    grid: &TimeGrid,
    cond: usize,
    x_init: Vec<f64>,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let d = x_init.len();
    let t_count = grid.num_transitions();
    let mut traj = Trajectory {
        cond,
        times: grid.steps().to_vec(),
        states: Vec::with_capacity(t_count + 1),
        noises: Vec::with_capacity(t_count),
        mus: Vec::with_capacity(t_count),
        sigmas: Vec::with_capacity(t_count),
        preds: Vec::with_capacity(t_count),
    };
    traj.states.push(x_init);
    for i in 0..t_count {
        let (t, t_next) = grid.transition(i);
        let pred = student.forward(&traj.states[i], t, cond)?;
        let c = coeffs(t_next)?;
        let noise = if c.sigma > 0.0 { rng.randn(d) } else { vec![0.0; d] };
        let (x_next, mu) = transition_sample(&pred, t_next, &noise)?;
        traj.states.push(x_next);
        traj.noises.push(noise);
        traj.mus.push(mu);
        traj.sigmas.push(c.sigma);
        traj.preds.push(pred);
    }
    Ok(traj)
}

#[derive(Clone, Debug)]
pub struct TrajectoryGroup {
    pub cond: usize,
    pub shared_init: bool,
    pub trajectories: Vec<Trajectory>,
}

/// Samples `group_size` trajectories with a frozen student.
pub fn sample_group(student: &MlpParams, cfg: &TrainConfig, rng: &mut RngStream) -> Result<TrajectoryGroup> {
    let d = cfg.teacher.dim();
    let shared = if cfg.shared_noise_init { Some(rng.randn(d)) } else { None };
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let x_init = match &shared {
            Some(x) => x.clone(),
            None => rng.randn(d),
        };
        trajectories.push(sample_trajectory(student, &cfg.grid, 0, x_init, rng)?);
    }
    Ok(TrajectoryGroup {
        cond: 0,
        shared_init: cfg.shared_noise_init,
        trajectories,
    })
}

/// Per-member step index, diffused timestep and diffusion noise.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardDraw {
    pub steps: Vec<usize>,
    pub tprimes: Vec<f64>,
    pub diffuse_noise: Vec<Vec<f64>>,
}

pub fn draw_reward_times(cfg: &TrainConfig, rng: &mut RngStream) -> RewardDraw {
    let g = cfg.group_size;
    let d = cfg.teacher.dim();
    let n_stoch = cfg.grid.num_stochastic();
    let (lo, hi) = cfg.reward_tprime;
    let steps = if cfg.share_t {
        vec![rng.below(n_stoch); g]
    } else {
        (0..g).map(|_| rng.below(n_stoch)).collect()
    };
    let tprimes = if cfg.share_tprime {
        vec![rng.uniform_in(lo, hi); g]
    } else {
        (0..g).map(|_| rng.uniform_in(lo, hi)).collect()
    };
    let diffuse_noise = (0..g).map(|_| rng.randn(d)).collect();
    RewardDraw {
        steps,
        tprimes,
        diffuse_noise,
    }
}

/// Everything the generator update needs from one group.
#[derive(Clone, Debug)]
pub struct GroupAdvantages {
    pub sites: Vec<TransitionSite>,
    pub tprimes: Vec<f64>,
    pub rdm: Tensor2,
    pub rs: Tensor2,
    pub w_dm: Tensor2,
    pub a_sum: Tensor2,
    /// Group-normalized fields: the matching reward (when enabled) first,
    /// then one per auxiliary reward.
    pub normalized: Vec<AdvantageField>,
    pub aux_raw: Vec<Vec<f64>>,
    pub beta_mean: f64,
}

fn rows(v: Vec<Vec<f64>>) -> Result<Tensor2> {
    Tensor2::from_rows(&v)
}

/// Rewards and advantages of one group at its drawn `(t, t')`.
pub fn group_advantages(
    group: &TrajectoryGroup,
    draw: &RewardDraw,
    fake: &FakeScoreState,
    cfg: &TrainConfig,
    round: usize,
) -> Result<GroupAdvantages> {
    let g = group.trajectories.len();
    let mut sites = Vec::with_capacity(g);
    let mut sc: Vec<ScheduleCoeffs> = Vec::with_capacity(g);
    let (mut teacher_x0, mut fake_x0, mut pred_x0) = (Vec::new(), Vec::new(), Vec::new());
    let (mut x_next, mut mu, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, traj) in group.trajectories.iter().enumerate() {
        let s = draw.steps[i];
        let site = traj.site(s);
        sc.push(coeffs(site.t_next)?);
        let out = guidance(
            &traj.preds[s],
            draw.tprimes[i],
            &draw.diffuse_noise[i],
            traj.cond,
            &cfg.teacher,
            fake,
            cfg.rs_mode,
        )?;
        teacher_x0.push(out.teacher_x0);
        fake_x0.push(out.fake_x0);
        pred_x0.push(out.pred_x0);
        rs.push(out.rs);
        x_next.push(site.x_next.clone());
        mu.push(traj.mus[s].clone());
        sites.push(site);
    }
    let (x_next, mu, rs) = (rows(x_next)?, rows(mu)?, rows(rs)?);
    let rdm = match cfg.rdm_mode {
        RdmMode::Exact => rdm_exact(&rs, &x_next, &mu, &sc)?.values,
        RdmMode::Practice => {
            rdm_practice(&rows(teacher_x0)?, &rows(fake_x0)?, &rows(pred_x0)?, &x_next, &mu)?.values
        }
    };
    let w_dm = wdm_weight(&x_next, &mu, &sc)?;
    let mut normalized = Vec::new();
    let a_dm = if cfg.gn {
        let f = group_normalize(&rdm, cfg.gn_eps)?;
        let v = f.values.clone();
        normalized.push(f);
        v
    } else {
        rdm.clone()
    };
    let mut aux = Vec::with_capacity(cfg.rewards.len());
    let mut aux_raw = Vec::with_capacity(cfg.rewards.len());
    for spec in &cfg.rewards {
        let raw = group
            .trajectories
            .iter()
            .map(|t| spec.reward.eval(t.final_state(), &cfg.teacher))
            .collect::<Result<Vec<f64>>>()?;
        let f = group_normalize(&Tensor2::column(raw.clone()), cfg.gn_eps)?;
        aux.push((cfg.aux_weight(round, spec.weight), f.values.data().to_vec()));
        normalized.push(f);
        aux_raw.push(raw);
    }
    let beta = BetaWeights::from_wdm(&w_dm, cfg.beta_mode);
    let dense_weight = match cfg.rdm_mode {
        RdmMode::Practice => w_dm.clone(),
        RdmMode::Exact => Tensor2::filled(g, w_dm.cols(), 1.0),
    };
    let a_sum = weighted_add(&a_dm, &dense_weight, &beta, &aux)?;
    Ok(GroupAdvantages {
        sites,
        tprimes: draw.tprimes.clone(),
        rdm,
        rs,
        w_dm,
        a_sum,
        normalized,
        aux_raw,
        beta_mean: beta.mean(),
    })
}

/// Builds the stop-gradient denoising batch for one fake update.
pub fn fake_batch(groups: &[TrajectoryGroup], cfg: &TrainConfig, rng: &mut RngStream) -> Vec<DenoiseSample> {
    let d = cfg.teacher.dim();
    let t_count = cfg.grid.num_transitions();
    let mut batch = Vec::new();
    for g in groups {
        for traj in &g.trajectories {
            let s = rng.below(t_count);
            let tprime = rng.uniform_in(cfg.grid.tprime_min, cfg.grid.tprime_max);
            batch.push(DenoiseSample {
                x0: traj.preds[s].clone(),
                tprime,
                noise: rng.randn(d),
                cond: traj.cond,
            });
        }
    }
    batch
}

/// Regresses `params` onto the teacher's posterior mean at diffused teacher
/// samples. Half the draws use the generator grid times (where `t = 1` maps
/// to the teacher mean), half are uniform over the diffused range.
pub fn fit_teacher(params: &mut MlpParams, cfg: &TrainConfig) -> Result<()> {
    if cfg.teacher_fit == 0 {
        return Ok(());
    }
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_TEACHER_FIT]);
    let mut opt = crate::nets::AdamState::new(params.values().len());
    let d = cfg.teacher.dim();
    let grid_times = &cfg.grid.steps()[..cfg.grid.num_transitions()];
    let inv = 1.0 / cfg.teacher_fit_batch as f64;
    for _ in 0..cfg.teacher_fit {
        let mut grad = MlpGrad::zeros(params.arch());
        for _ in 0..cfg.teacher_fit_batch {
            let x0 = cfg.teacher.sample(&mut rng);
            let t = if rng.uniform() < 0.5 {
                grid_times[rng.below(grid_times.len())]
            } else {
                rng.uniform_in(cfg.grid.tprime_min, cfg.grid.tprime_max)
            };
            let xt = crate::schedule::forward_diffuse(&x0, t, &rng.randn(d))?;
            let target = if t >= 1.0 {
                cfg.teacher.mean()
            } else {
                cfg.teacher.posterior_mean(&xt, t)?
            };
            let trace = params.forward_trace(&xt, t, 0)?;
            let up: Vec<f64> = trace.output.iter().zip(&target).map(|(o, y)| 2.0 * inv * (o - y)).collect();
            params.backward_into(&trace, &up, &mut grad)?;
        }
        clip_grad_norm(&mut grad, cfg.grad_clip);
        if adam_step(params, &mut opt, &grad, &cfg.teacher_fit_opt)? == StepOutcome::SkippedNonFinite {
            return Err(Error::NonFinite("teacher fit".into()));
        }
    }
    Ok(())
}

/// Student, fake denoiser and loop position.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub student: StudentState,
    pub fake: FakeScoreState,
    /// Completed rounds.
    pub round: usize,
    pub samples: u64,
}

impl TrainerState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_INIT]);
        let mut student = StudentState::init(cfg.arch(), &mut rng, cfg.init_scale)?;
        fit_teacher(&mut student.params, cfg)?;
        let mut fake = FakeScoreState::new(student.params.clone());
        for i in 0..cfg.fake_pretrain {
            let mut srng = RngStream::keyed(cfg.seed, &[PURPOSE_PRETRAIN, i as u64, 0]);
            let groups = (0..cfg.groups)
                .map(|_| sample_group(&student.params, cfg, &mut srng))
                .collect::<Result<Vec<_>>>()?;
            let mut frng = RngStream::keyed(cfg.seed, &[PURPOSE_PRETRAIN, i as u64, 1]);
            let batch = fake_batch(&groups, cfg, &mut frng);
            fake.fake_denoise_update(&batch, &cfg.fake_opt, cfg.grad_clip)?;
        }
        Ok(Self {
            student,
            fake,
            round: 0,
            samples: 0,
        })
    }

    pub fn write_student<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_checkpoint(w, "student", &self.student.params, &self.student.opt)
    }

    pub fn write_fake<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_checkpoint(w, "fake", &self.fake.params, &self.fake.opt)
    }

    /// Loop position; every random stream is keyed by round, so this is the
    /// whole generator state.
    pub fn write_rng<W: Write>(&self, mut w: W, seed: u64) -> std::io::Result<()> {
        writeln!(w, "seed {seed}")?;
        writeln!(w, "round {}", self.round)?;
        writeln!(w, "samples {}", self.samples)
    }

    pub fn read<A: BufRead, B: BufRead, C: BufRead>(student: A, fake: B, rng: C, seed: u64) -> Result<Self> {
        let (sp, so) = read_checkpoint(student, "student")?;
        let (fp, fo) = read_checkpoint(fake, "fake")?;
        let mut vals = std::collections::HashMap::new();
        for line in rng.lines() {
            let line = line.map_err(|e| Error::Checkpoint(e.to_string()))?;
            if let Some((k, v)) = line.split_once(' ') {
                let n: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value in rng state: {line:?}")))?;
                vals.insert(k.to_string(), n);
            }
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("rng state lacks {k}")))
        };
        if get("seed")? != seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} does not match configured seed {seed}",
                get("seed")?
            )));
        }
        Ok(Self {
            student: StudentState { params: sp, opt: so },
            fake: FakeScoreState { params: fp, opt: fo },
            round: get("round")? as usize,
            samples: get("samples")?,
        })
    }
}

/// Diagnostics of one round.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    pub aborted: Option<String>,
    pub fake_loss: f64,
    pub rs_abs_mean: f64,
    pub beta_mean: f64,
    pub first_clip_frac: f64,
    pub clip_frac: f64,
    pub ratio_mean: f64,
    /// Max elementwise relative gap between the first inner update and the
    /// plain estimator, when verification is on.
    pub on_policy_gap: Option<f64>,
    pub student_hash_before_fake: u64,
    pub student_hash_after_fake: u64,
    pub advantages: Vec<GroupAdvantages>,
}

fn stack_advantages(adv: &[GroupAdvantages]) -> Result<(Vec<TransitionSite>, Tensor2)> {
    let sites = adv.iter().flat_map(|a| a.sites.iter().cloned()).collect();
    let a = Tensor2::vstack(&adv.iter().map(|a| a.a_sum.clone()).collect::<Vec<_>>())?;
    Ok((sites, a))
}

pub(crate) fn max_rel_gap(a: &MlpGrad, b: &MlpGrad) -> f64 {
    let scale = b.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-12 * scale).max(f64::MIN_POSITIVE);
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Samples all groups of a round with the current student.
pub fn sample_round(state: &TrainerState, cfg: &TrainConfig, round: usize) -> Result<Vec<TrajectoryGroup>> {
    (0..cfg.groups)
        .map(|g| {
            let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_SAMPLE, round as u64, g as u64]);
            sample_group(&state.student.params, cfg, &mut rng)
        })
        .collect()
}

/// Reward draws of a round, one per group.
pub fn reward_draws(cfg: &TrainConfig, round: usize) -> Vec<RewardDraw> {
    (0..cfg.groups)
        .map(|g| {
            let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_REWARD, round as u64, g as u64]);
            draw_reward_times(cfg, &mut rng)
        })
        .collect()
}

fn round_body(state: &mut TrainerState, cfg: &TrainConfig) -> Result<RoundReport> {
    let round = state.round;
    let groups = sample_round(state, cfg, round)?;

    let before = state.student.params.fingerprint();
    let mut frng = RngStream::keyed(cfg.seed, &[PURPOSE_FAKE, round as u64]);
    let batch = fake_batch(&groups, cfg, &mut frng);
    let fake_loss = state.fake.fake_denoise_update(&batch, &cfg.fake_opt, cfg.grad_clip)?;
    let after = state.student.params.fingerprint();

    let draws = reward_draws(cfg, round);
    let advantages = groups
        .iter()
        .zip(&draws)
        .map(|(g, d)| group_advantages(g, d, &state.fake, cfg, round))
        .collect::<Result<Vec<_>>>()?;
    let (sites, a_all) = stack_advantages(&advantages)?;
    if !a_all.is_finite() {
        return Err(Error::NonFinite("advantages".into()));
    }

    let old = state.student.params.clone();
    let (mut clip_sum, mut ratio_sum, mut first_clip, mut gap) = (0.0, 0.0, 0.0, None);
    for u in 0..cfg.grpo.inner_updates {
        let est = grpo_surrogate(&state.student.params, &old, &sites, &a_all, &cfg.grpo)?;
        if !est.grads.is_finite() || !est.value.is_finite() {
            return Err(Error::NonFinite("surrogate gradient".into()));
        }
        if u == 0 {
            first_clip = est.clip_frac;
            if cfg.verify_on_policy {
                // a per-sample ratio couples dimensions, so its plain
                // counterpart uses the row sum broadcast over the row
                let reference = match cfg.grpo.ratio_mode {
                    RatioMode::PerDim => a_all.clone(),
                    RatioMode::PerSample => {
                        let mut r = a_all.clone();
                        for i in 0..r.rows() {
                            let total: f64 = r.row(i).iter().sum();
                            r.row_mut(i).fill(total);
                        }
                        r
                    }
                };
                let mut plain = policy_grad_rdm(&state.student.params, &sites, &reference)?.grads;
                plain.scale(1.0 / cfg.teacher.dim() as f64);
                gap = Some(max_rel_gap(&est.grads, &plain));
            }
        }
        clip_sum += est.clip_frac;
        ratio_sum += est.ratio_mean;
        let mut descent = est.grads;
        descent.scale(-1.0);
        clip_grad_norm(&mut descent, cfg.grad_clip);
        if adam_step(&mut state.student.params, &mut state.student.opt, &descent, &cfg.student_opt)?
            == StepOutcome::SkippedNonFinite
        {
            return Err(Error::NonFinite("generator step".into()));
        }
    }
    if !state.student.params.is_finite() || !state.fake.params.is_finite() {
        return Err(Error::NonFinite("parameters".into()));
    }
    let n_el: usize = advantages.iter().map(|a| a.rs.data().len()).sum();
    let rs_abs_mean = advantages
        .iter()
        .flat_map(|a| a.rs.data().iter())
        .map(|v| v.abs())
        .sum::<f64>()
        / n_el as f64;
    let beta_mean = advantages.iter().map(|a| a.beta_mean).sum::<f64>() / advantages.len() as f64;
    let k = cfg.grpo.inner_updates as f64;
    state.round += 1;
    state.samples += (cfg.groups * cfg.group_size) as u64;
    Ok(RoundReport {
        round,
        aborted: None,
        fake_loss,
        rs_abs_mean,
        beta_mean,
        first_clip_frac: first_clip,
        clip_frac: clip_sum / k,
        ratio_mean: ratio_sum / k,
        on_policy_gap: gap,
        student_hash_before_fake: before,
        student_hash_after_fake: after,
        advantages,
    })
}

/// One full round. A non-finite intermediate restores the pre-round state;
/// the round still counts so the run moves on with fresh randomness.
pub fn train_round(state: &mut TrainerState, cfg: &TrainConfig) -> Result<RoundReport> {
    let snapshot = state.clone();
    match round_body(state, cfg) {
        Ok(r) => Ok(r),
        Err(Error::NonFinite(msg)) => {
            *state = snapshot;
            let round = state.round;
            state.round += 1;
            state.samples += (cfg.groups * cfg.group_size) as u64;
            Ok(RoundReport {
                round,
                aborted: Some(msg),
                fake_loss: f64::NAN,
                rs_abs_mean: f64::NAN,
                beta_mean: f64::NAN,
                first_clip_frac: f64::NAN,
                clip_frac: f64::NAN,
                ratio_mean: f64::NAN,
                on_policy_gap: None,
                student_hash_before_fake: 0,
                student_hash_after_fake: 0,
                advantages: Vec::new(),
            })
        }
        Err(e) => {
            *state = snapshot;
            Err(e)
        }
    }
}

/// Receives run outputs; the harness decides where they go.
pub trait RunSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()>;
    fn checkpoint(&mut self, _state: &TrainerState, _seed: u64) -> Result<()> {
        Ok(())
    }
    fn incident(&mut self, _round: usize, _msg: &str) {}
}

/// Collects rows in memory.
#[derive(Default, Debug)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
    pub incidents: Vec<(usize, String)>,
}

impl RunSink for MemorySink {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }

    fn incident(&mut self, round: usize, msg: &str) {
        self.incidents.push((round, msg.to_string()));
    }
}

#[derive(Default)]
struct StatsWindow {
    rs_abs: f64,
    clip: f64,
    ratio: f64,
    beta: f64,
    n: usize,
}

impl StatsWindow {
    fn add(&mut self, r: &RoundReport) {
        if r.aborted.is_none() {
            self.rs_abs += r.rs_abs_mean;
            self.clip += r.clip_frac;
            self.ratio += r.ratio_mean;
            self.beta += r.beta_mean;
            self.n += 1;
        }
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            v / self.n as f64
        }
    }
}

/// Draws evaluation samples from the student with a fixed stream, so
/// different runs with one seed see the same initial and transition noise.
pub fn eval_samples(student: &MlpParams, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_EVAL]);
    let d = cfg.teacher.dim();
    (0..cfg.eval_samples)
        .map(|_| {
            let x = rng.randn(d);
            Ok(sample_trajectory(student, &cfg.grid, 0, x, &mut rng)?.final_state().to_vec())
        })
        .collect()
}

pub fn teacher_reference(cfg: &TrainConfig) -> Result<EnergyReference> {
    let mut rng = RngStream::keyed(cfg.seed, &[PURPOSE_TEACHER_EVAL]);
    EnergyReference::new(cfg.teacher.sample_n(&mut rng, cfg.teacher_samples))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainerState,
    teacher_ref: EnergyReference,
    reference: Option<EnergyReference>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = TrainerState::init(&cfg)?;
        Self::from_state(cfg, state)
    }

    pub fn from_state(cfg: TrainConfig, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        if state.student.params.arch() != cfg.arch() || state.fake.params.arch() != cfg.arch() {
            return Err(Error::Checkpoint("network shape does not match the config".into()));
        }
        let teacher_ref = teacher_reference(&cfg)?;
        Ok(Self {
            cfg,
            state,
            teacher_ref,
            reference: None,
        })
    }

    /// Samples compared against for `energy_dist_sd`.
    pub fn set_reference(&mut self, samples: Vec<Vec<f64>>) -> Result<()> {
        self.reference = Some(EnergyReference::new(samples)?);
        Ok(())
    }

    pub fn evaluate(&self) -> Result<MetricsRow> {
        let xs = eval_samples(&self.state.student.params, &self.cfg)?;
        let energy = self.teacher_ref.distance(&xs)?;
        let energy_sd = match &self.reference {
            Some(r) => r.distance(&xs)?,
            None => f64::NAN,
        };
        let aux = if self.cfg.rewards.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            for x in &xs {
                for r in &self.cfg.rewards {
                    total += r.reward.eval(x, &self.cfg.teacher)?;
                }
            }
            total / xs.len() as f64
        };
        Ok(MetricsRow {
            iter: self.state.round,
            energy_dist: energy,
            energy_dist_sd: energy_sd,
            coverage: mode_coverage(&xs, &self.cfg.teacher),
            aux_reward_mean: aux,
            rs_abs_mean: f64::NAN,
            clip_frac: f64::NAN,
            ratio_mean: f64::NAN,
            beta_dm_mean: f64::NAN,
            samples: self.state.samples,
            wall_ms: 0,
        })
    }

    pub fn step(&mut self) -> Result<RoundReport> {
        train_round(&mut self.state, &self.cfg)
    }

    /// Trains until `cfg.iterations` rounds are complete. A fresh run emits
    /// the initial evaluation row; a resumed run continues after its last row.
    pub fn run(&mut self, sink: &mut dyn RunSink) -> Result<()> {
        let start = Instant::now();
        let wall_clock = self.cfg.wall_clock;
        let wall = |start: &Instant| {
            if wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            }
        };
        if self.state.round == 0 {
            let mut row = self.evaluate()?;
            row.wall_ms = wall(&start);
            sink.row(&row)?;
        }
        let mut window = StatsWindow::default();
        while self.state.round < self.cfg.iterations {
            let report = self.step()?;
            if let Some(msg) = &report.aborted {
                sink.incident(report.round, msg);
            }
            window.add(&report);
            let done = self.state.round;
            if done % self.cfg.eval_every == 0 || done == self.cfg.iterations {
                let mut row = self.evaluate()?;
                row.rs_abs_mean = window.mean(window.rs_abs);
                row.clip_frac = window.mean(window.clip);
                row.ratio_mean = window.mean(window.ratio);
                row.beta_dm_mean = window.mean(window.beta);
                row.wall_ms = wall(&start);
                sink.row(&row)?;
                window = StatsWindow::default();
                if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                    sink.checkpoint(&self.state, self.cfg.seed)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{dmd_gradient_oracle, DmdItem};

    fn tiny() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            eval_every: 3,
            eval_samples: 64,
            teacher_samples: 64,
            hidden: 16,
            fake_pretrain: 2,
            teacher_fit: 5,
            teacher_fit_batch: 8,
            warmup: 2,
            rewards: vec![RewardSpec {
                reward: ExternalReward::Radial { center: vec![0.0, 0.0] },
                weight: 10.0,
            }],
            ..TrainConfig::ring_default()
        }
    }

    #[test]
    fn trajectory_structure_and_reconstruction() {
        let cfg = tiny();
        let state = TrainerState::init(&cfg).unwrap();
        let mut rng = RngStream::new(1, 0);
        let g = sample_group(&state.student.params, &cfg, &mut rng).unwrap();
        for t in &g.trajectories {
            assert_eq!(t.states.len(), 5);
            assert_eq!(t.num_transitions(), 4);
            assert_eq!(t.sigmas[3], 0.0);
            assert_eq!(t.stochastic_sites().len(), 3);
            for i in 0..4 {
                let c = coeffs(t.times[i + 1]).unwrap();
                for j in 0..2 {
                    assert_eq!(t.states[i + 1][j], c.alpha * t.preds[i][j] + c.sigma * t.noises[i][j]);
                }
            }
            assert_eq!(t.states[0], g.trajectories[0].states[0]);
        }
    }

    #[test]
    fn independent_init_differs() {
        let cfg = TrainConfig {
            shared_noise_init: false,
            ..tiny()
        };
        let state = TrainerState::init(&cfg).unwrap();
        let mut rng = RngStream::new(1, 0);
        let g = sample_group(&state.student.params, &cfg, &mut rng).unwrap();
        assert_ne!(g.trajectories[0].states[0], g.trajectories[1].states[0]);
    }

    #[test]
    fn shared_draws_respected() {
        let cfg = tiny();
        let mut rng = RngStream::new(5, 0);
        let d = draw_reward_times(&cfg, &mut rng);
        assert!(d.steps.iter().all(|s| *s == d.steps[0] && *s < 3));
        assert!(d.tprimes.iter().all(|t| *t == d.tprimes[0]));
        let cfg = TrainConfig {
            share_t: false,
            share_tprime: false,
            ..tiny()
        };
        let d = draw_reward_times(&cfg, &mut rng);
        assert!(d.tprimes.iter().any(|t| *t != d.tprimes[0]));
    }

    #[test]
    fn round_invariants() {
        let cfg = TrainConfig {
            verify_on_policy: true,
            grpo: GrpoConfig {
                inner_updates: 2,
                ..GrpoConfig::default()
            },
            ..tiny()
        };
        let mut state = TrainerState::init(&cfg).unwrap();
        for _ in 0..3 {
            let r = train_round(&mut state, &cfg).unwrap();
            assert!(r.aborted.is_none());
            assert_eq!(r.first_clip_frac, 0.0);
            assert!(r.on_policy_gap.unwrap() < 1e-10);
            assert_eq!(r.student_hash_before_fake, r.student_hash_after_fake);
            for a in &r.advantages {
                let t = a.sites[0].t;
                assert!(a.sites.iter().all(|s| s.t == t));
                assert!(a.tprimes.iter().all(|s| *s == a.tprimes[0]));
            }
        }
        assert_eq!(state.round, 3);
        assert_eq!(state.samples, 96);
    }

    #[test]
    fn warmup_zeroes_aux_weights() {
        let cfg = tiny();
        let state = TrainerState::init(&cfg).unwrap();
        let groups = sample_round(&state, &cfg, 0).unwrap();
        let draws = reward_draws(&cfg, 0);
        let warm = group_advantages(&groups[0], &draws[0], &state.fake, &cfg, 0).unwrap();
        let no_aux = TrainConfig {
            rewards: Vec::new(),
            ..tiny()
        };
        let plain = group_advantages(&groups[0], &draws[0], &state.fake, &no_aux, 0).unwrap();
        assert_eq!(warm.a_sum, plain.a_sum);
        let later = group_advantages(&groups[0], &draws[0], &state.fake, &cfg, 5).unwrap();
        assert_ne!(later.a_sum, plain.a_sum);
    }

    #[test]
    fn vanilla_reduction_matches_direct_gradient() {
        let cfg = TrainConfig {
            gn: false,
            share_t: false,
            share_tprime: false,
            shared_noise_init: false,
            rdm_mode: RdmMode::Exact,
            rewards: Vec::new(),
            ..tiny()
        };
        let state = TrainerState::init(&cfg).unwrap();
        let groups = sample_round(&state, &cfg, 0).unwrap();
        let draws = reward_draws(&cfg, 0);
        let adv: Vec<_> = groups
            .iter()
            .zip(&draws)
            .map(|(g, d)| group_advantages(g, d, &state.fake, &cfg, 0).unwrap())
            .collect();
        let (sites, a) = stack_advantages(&adv).unwrap();
        let p = &state.student.params;
        let est = grpo_surrogate(p, p, &sites, &a, &cfg.grpo).unwrap();
        let mut items = Vec::new();
        for (g, d) in groups.iter().zip(&draws) {
            for (i, t) in g.trajectories.iter().enumerate() {
                items.push(DmdItem {
                    x_t: t.states[d.steps[i]].clone(),
                    t: t.times[d.steps[i]],
                    cond: 0,
                    tprime: d.tprimes[i],
                    diffuse_noise: d.diffuse_noise[i].clone(),
                });
            }
        }
        let direct = dmd_gradient_oracle(p, &cfg.teacher, &state.fake, &items, cfg.rs_mode, false).unwrap();
        let dot: f64 = est.grads.values().iter().zip(direct.values()).map(|(a, b)| a * b).sum();
        let cos = -dot / (est.grads.norm() * direct.norm());
        assert!(cos > 0.999, "cosine {cos}");
    }

    #[test]
    fn run_is_deterministic_and_resumable() {
        let cfg = tiny();
        let mut a = MemorySink::default();
        Trainer::new(cfg.clone()).unwrap().run(&mut a).unwrap();
        let mut b = MemorySink::default();
        Trainer::new(cfg.clone()).unwrap().run(&mut b).unwrap();
        assert_eq!(a.rows.len(), 3);
        let ca: Vec<String> = a.rows.iter().map(|r| r.to_csv()).collect();
        let cb: Vec<String> = b.rows.iter().map(|r| r.to_csv()).collect();
        assert_eq!(ca, cb);

        // stop after 3 rounds, serialize, resume
        let mut first = Trainer::new(TrainConfig {
            iterations: 3,
            ..cfg.clone()
        })
        .unwrap();
        first.run(&mut MemorySink::default()).unwrap();
        let (mut s, mut f, mut r) = (Vec::new(), Vec::new(), Vec::new());
        first.state.write_student(&mut s).unwrap();
        first.state.write_fake(&mut f).unwrap();
        first.state.write_rng(&mut r, cfg.seed).unwrap();
        let restored = TrainerState::read(&s[..], &f[..], &r[..], cfg.seed).unwrap();
        let mut resumed = Trainer::from_state(cfg.clone(), restored).unwrap();
        let mut c = MemorySink::default();
        resumed.run(&mut c).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.rows[0].to_csv(), ca[2]);
    }

    #[test]
    fn zero_iterations_emit_initial_row() {
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny()
        };
        let mut sink = MemorySink::default();
        Trainer::new(cfg).unwrap().run(&mut sink).unwrap();
        assert_eq!(sink.rows.len(), 1);
        assert_eq!(sink.rows[0].iter, 0);
        assert!(sink.rows[0].clip_frac.is_nan());
    }
}
