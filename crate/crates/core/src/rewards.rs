//! Rewards, group-normalized advantages, and their weighting.
//!
//! Dense fields are `G x d` tensors (one row per group member), sparse
//! rewards are one scalar per member. All arithmetic on distribution
//! matching rewards is elementwise.

use crate::error::{check_len, Error, Result};
use crate::numerics::{l1, sq_dist, Tensor2};
use crate::schedule::ScheduleCoeffs;
use crate::teacher::GmmSpec;

/// Guard added to `|x_next - mu|` in the amplitude weight.
pub const WDM_EPS: f64 = 1e-7;
/// Floor for the L1 norm in the practical reward's weighting factor.
pub const RDM_NORM_FLOOR: f64 = 1e-12;
/// Below this `|x_next - mu|` the exact reward is treated as undefined.
pub const RDM_EXACT_FLOOR: f64 = 1e-12;

/// `1` for strictly positive input, `-1` otherwise (including zero).
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `R_s`: teacher output minus fake output.
pub fn score_difference(teacher_out: &Tensor2, fake_out: &Tensor2) -> Result<Tensor2> {
    teacher_out.zip_map(fake_out, "score_difference", |a, b| a - b)
}

#[derive(Clone, Debug)]
pub struct ExactRdm {
    pub values: Tensor2,
    /// Flat indices where `|x_next - mu|` was below [`RDM_EXACT_FLOOR`]; the
    /// value there uses a sign-normalized denominator of that magnitude.
    pub degenerate: Vec<usize>,
}

fn check_rows(coeffs: &[ScheduleCoeffs], rows: usize) -> Result<()> {
    check_len("per-row schedule coefficients", rows, coeffs.len())?;
    for c in coeffs {
        if !(c.alpha > 0.0) {
            return Err(Error::Domain(format!("alpha = 0 at t = {}", c.t)));
        }
    }
    Ok(())
}

/// Exact distribution-matching reward,
/// `R_s / (x_next - mu) * sigma^2 / alpha` with per-row transition coefficients.
pub fn rdm_exact(rs: &Tensor2, x_next: &Tensor2, mu: &Tensor2, coeffs: &[ScheduleCoeffs]) -> Result<ExactRdm> {
    rs.same_shape(x_next, "rdm_exact")?;
    rs.same_shape(mu, "rdm_exact")?;
    check_rows(coeffs, rs.rows())?;
    let mut values = Tensor2::zeros(rs.rows(), rs.cols());
    let mut degenerate = Vec::new();
    for r in 0..rs.rows() {
        let c = coeffs[r];
        let k = c.sigma * c.sigma / c.alpha;
        for j in 0..rs.cols() {
            let mut diff = x_next.get(r, j) - mu.get(r, j);
            if diff.abs() < RDM_EXACT_FLOOR {
                degenerate.push(r * rs.cols() + j);
                diff = sign(diff) * RDM_EXACT_FLOOR;
            }
            values.set(r, j, rs.get(r, j) / diff * k);
        }
    }
    Ok(ExactRdm { values, degenerate })
}

#[derive(Clone, Debug)]
pub struct PracticeRdm {
    pub values: Tensor2,
    /// Rows whose L1 weighting norm hit [`RDM_NORM_FLOOR`].
    pub clamped: usize,
}

/// Sign-normalized reward with the distribution-matching weighting factor:
/// `(teacher_x0 - fake_x0) / sign(x_next - mu) * d / ||teacher_x0 - pred_x0||_1`.
pub fn rdm_practice(
    teacher_x0: &Tensor2,
    fake_x0: &Tensor2,
    pred_x0: &Tensor2,
    x_next: &Tensor2,
    mu: &Tensor2,
) -> Result<PracticeRdm> {
    for t in [fake_x0, pred_x0, x_next, mu] {
        teacher_x0.same_shape(t, "rdm_practice")?;
    }
    let d = teacher_x0.cols() as f64;
    let mut values = Tensor2::zeros(teacher_x0.rows(), teacher_x0.cols());
    let mut clamped = 0;
    for r in 0..teacher_x0.rows() {
        let mut norm: f64 = teacher_x0
            .row(r)
            .iter()
            .zip(pred_x0.row(r))
            .map(|(a, b)| (a - b).abs())
            .sum();
        if norm < RDM_NORM_FLOOR {
            norm = RDM_NORM_FLOOR;
            clamped += 1;
        }
        let factor = d / norm;
        for j in 0..teacher_x0.cols() {
            let diff = teacher_x0.get(r, j) - fake_x0.get(r, j);
            values.set(r, j, diff / sign(x_next.get(r, j) - mu.get(r, j)) * factor);
        }
    }
    Ok(PracticeRdm { values, clamped })
}

/// Amplitude weight `1 / (|x_next - mu| + eps) * sigma^2 / alpha`.
pub fn wdm_weight(x_next: &Tensor2, mu: &Tensor2, coeffs: &[ScheduleCoeffs]) -> Result<Tensor2> {
    x_next.same_shape(mu, "wdm_weight")?;
    check_rows(coeffs, x_next.rows())?;
    let mut w = Tensor2::zeros(x_next.rows(), x_next.cols());
    for r in 0..x_next.rows() {
        let c = coeffs[r];
        let k = c.sigma * c.sigma / c.alpha;
        for j in 0..x_next.cols() {
            w.set(r, j, k / ((x_next.get(r, j) - mu.get(r, j)).abs() + WDM_EPS));
        }
    }
    Ok(w)
}

/// Sample-wise mean of `|w_dm|` over the data dimensions.
pub fn beta_dm(w_dm: &Tensor2) -> Vec<f64> {
    (0..w_dm.rows())
        .map(|r| l1(w_dm.row(r)) / w_dm.cols() as f64)
        .collect()
}

/// Granularity of the auxiliary-advantage scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaMode {
    /// Per-sample mean of `w_dm`.
    Sample,
    /// `w_dm` itself, per element.
    Pixel,
    /// Constant 1.
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BetaWeights {
    PerSample(Vec<f64>),
    PerElement(Tensor2),
    Unit,
}

impl BetaWeights {
    pub fn from_wdm(w_dm: &Tensor2, mode: BetaMode) -> Self {
        match mode {
            BetaMode::Sample => BetaWeights::PerSample(beta_dm(w_dm)),
            BetaMode::Pixel => BetaWeights::PerElement(w_dm.clone()),
            BetaMode::Off => BetaWeights::Unit,
        }
    }

    fn at(&self, r: usize, j: usize) -> f64 {
        match self {
            BetaWeights::PerSample(b) => b[r],
            BetaWeights::PerElement(t) => t.get(r, j),
            BetaWeights::Unit => 1.0,
        }
    }

    /// Mean scale, for metrics.
    pub fn mean(&self) -> f64 {
        let v: &[f64] = match self {
            BetaWeights::PerSample(b) => b,
            BetaWeights::PerElement(t) => t.data(),
            BetaWeights::Unit => return 1.0,
        };
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Group-normalized values plus the per-position statistics used.
#[derive(Clone, Debug)]
pub struct AdvantageField {
    pub values: Tensor2,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Positions whose std fell below the guard and were zeroed.
    pub guarded: Vec<usize>,
}

/// Standardizes every column across the rows (population std). Columns
/// with std below `eps_std` map to zero.
pub fn group_normalize(field: &Tensor2, eps_std: f64) -> Result<AdvantageField> {
    let g = field.rows();
    if g < 2 {
        return Err(Error::Domain(format!("group normalization needs G >= 2, got {g}")));
    }
    let mut values = Tensor2::zeros(g, field.cols());
    let mut means = Vec::with_capacity(field.cols());
    let mut stds = Vec::with_capacity(field.cols());
    let mut guarded = Vec::new();
    for j in 0..field.cols() {
        let mean = (0..g).map(|r| field.get(r, j)).sum::<f64>() / g as f64;
        let var = (0..g).map(|r| (field.get(r, j) - mean).powi(2)).sum::<f64>() / g as f64;
        let std = var.sqrt();
        if std < eps_std {
            guarded.push(j);
        } else {
            for r in 0..g {
                values.set(r, j, (field.get(r, j) - mean) / std);
            }
        }
        means.push(mean);
        stds.push(std);
    }
    Ok(AdvantageField {
        values,
        mean: means,
        std: stds,
        guarded,
    })
}

/// Toy auxiliary rewards evaluated on final samples.
#[derive(Clone, Debug, PartialEq)]
pub enum ExternalReward {
    /// `-||x0 - center||^2`
    Radial { center: Vec<f64> },
    /// `normal . x0`
    Halfspace { normal: Vec<f64> },
    /// Log posterior probability of teacher component `component` at `t = 0`.
    ModeAffinity { component: usize },
}

impl ExternalReward {
    /// Parses `kind` with its numeric parameters, e.g. `("radial", [0, 0])`.
    pub fn parse(kind: &str, params: &[f64]) -> Result<Self> {
        match kind {
            "radial" => Ok(ExternalReward::Radial {
                center: params.to_vec(),
            }),
            "halfspace" => Ok(ExternalReward::Halfspace {
                normal: params.to_vec(),
            }),
            "mode" | "mode-affinity" | "mode_affinity" => match params {
                [k] if *k >= 0.0 && k.fract() == 0.0 => Ok(ExternalReward::ModeAffinity {
                    component: *k as usize,
                }),
                _ => Err(Error::config("mode-affinity reward takes one component index")),
            },
            other => Err(Error::config(format!("unknown reward kind {other:?}"))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ExternalReward::Radial { .. } => "radial",
            ExternalReward::Halfspace { .. } => "halfspace",
            ExternalReward::ModeAffinity { .. } => "mode-affinity",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            ExternalReward::Radial { center } => center.clone(),
            ExternalReward::Halfspace { normal } => normal.clone(),
            ExternalReward::ModeAffinity { component } => vec![*component as f64],
        }
    }

    pub fn eval(&self, x0: &[f64], teacher: &GmmSpec) -> Result<f64> {
        match self {
            ExternalReward::Radial { center } => {
                check_len("radial reward center", x0.len(), center.len())?;
                Ok(-sq_dist(x0, center))
            }
            ExternalReward::Halfspace { normal } => {
                check_len("halfspace reward normal", x0.len(), normal.len())?;
                Ok(crate::numerics::dot(normal, x0))
            }
            ExternalReward::ModeAffinity { component } => {
                teacher.log_responsibility(x0, 0.0, *component)
            }
        }
    }
}

/// `A_sum = w_dm * A_dm + sum_j beta * w_j * A_oj`, with each sparse
/// `A_oj` broadcast across its row.
pub fn weighted_add(
    a_dm: &Tensor2,
    w_dm: &Tensor2,
    beta: &BetaWeights,
    aux: &[(f64, Vec<f64>)],
) -> Result<Tensor2> {
    a_dm.same_shape(w_dm, "weighted_add")?;
    if let BetaWeights::PerSample(b) = beta {
        check_len("weighted_add beta", a_dm.rows(), b.len())?;
    }
    if let BetaWeights::PerElement(b) = beta {
        a_dm.same_shape(b, "weighted_add beta")?;
    }
    for (_, a) in aux {
        check_len("weighted_add auxiliary advantage", a_dm.rows(), a.len())?;
    }
    let mut out = a_dm.zip_map(w_dm, "weighted_add", |a, w| a * w)?;
    for (w_j, a_oj) in aux {
        for r in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.get(r, j) + beta.at(r, j) * w_j * a_oj[r];
                out.set(r, j, v);
            }
        }
    }
    Ok(out)
}
