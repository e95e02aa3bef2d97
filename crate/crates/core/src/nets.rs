//! Student generator, fake denoiser, and their optimizer.

use std::io::{BufRead, Write};

use crate::error::{check_finite, Error, Result};
use crate::numerics::{MlpArch, MlpGrad, MlpParams, RngStream};
use crate::schedule::forward_diffuse;
use crate::teacher::Denoiser;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient had a NaN or infinity; parameters and moments untouched.
    SkippedNonFinite,
}

/// One AdamW step descending `grads`.
pub fn adam_step(
    params: &mut MlpParams,
    state: &mut AdamState,
    grads: &MlpGrad,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    let n = params.values().len();
    if grads.values().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            context: "adam step",
            expected: n,
            got: grads.values().len(),
        });
    }
    if !grads.is_finite() {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let p = params.values_mut();
    for i in 0..n {
        let g = grads.values()[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
    Ok(StepOutcome::Applied)
}

/// Rescales `grads` to norm `max_norm` when it exceeds it; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grads: &mut MlpGrad, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Generator `G_theta` with its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub params: MlpParams,
    pub opt: AdamState,
}

/// Fake denoiser `mu_fake` with its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeScoreState {
    pub params: MlpParams,
    pub opt: AdamState,
}

impl StudentState {
    pub fn new(params: MlpParams) -> Self {
        let n = params.values().len();
        Self {
            params,
            opt: AdamState::new(n),
        }
    }

    pub fn init(arch: MlpArch, rng: &mut RngStream, scale: f64) -> Result<Self> {
        Ok(Self::new(MlpParams::init(arch, rng, scale)?))
    }

    /// `x0_hat = G_theta(x_t)`.
    pub fn generate_step(&self, x_t: &[f64], t: f64, cond: usize) -> Result<Vec<f64>> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("generator timestep {t} outside (0, 1]")));
        }
        self.params.forward(x_t, t, cond)
    }

    /// Frozen copy of the current parameters.
    pub fn snapshot(&self) -> MlpParams {
        self.params.clone()
    }
}

/// One stop-gradient denoising example: `x0` is a detached generator output.
#[derive(Clone, Debug)]
pub struct DenoiseSample {
    pub x0: Vec<f64>,
    pub tprime: f64,
    pub noise: Vec<f64>,
    pub cond: usize,
}

impl FakeScoreState {
    pub fn new(params: MlpParams) -> Self {
        let n = params.values().len();
        Self {
            params,
            opt: AdamState::new(n),
        }
    }

    pub fn init(arch: MlpArch, rng: &mut RngStream, scale: f64) -> Result<Self> {
        Ok(Self::new(MlpParams::init(arch, rng, scale)?))
    }

    pub fn fake_denoise(&self, x: &[f64], tprime: f64, cond: usize) -> Result<Vec<f64>> {
        if !(tprime > 0.0 && tprime <= 1.0) {
            return Err(Error::Domain(format!("diffused timestep {tprime} outside (0, 1]")));
        }
        self.params.forward(x, tprime, cond)
    }

    /// Mean over the batch of `||mu_fake(x_t', t') - x0||^2` and its gradient.
    pub fn denoise_loss_grad(&self, batch: &[DenoiseSample]) -> Result<(f64, MlpGrad)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty denoising batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut grad = MlpGrad::zeros(self.params.arch());
        let mut loss = 0.0;
        for s in batch {
            let xt = forward_diffuse(&s.x0, s.tprime, &s.noise)?;
            let trace = self.params.forward_trace(&xt, s.tprime, s.cond)?;
            let resid: Vec<f64> = trace.output.iter().zip(&s.x0).map(|(o, x)| o - x).collect();
            loss += inv * resid.iter().map(|r| r * r).sum::<f64>();
            let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * inv * r).collect();
            self.params.backward_into(&trace, &upstream, &mut grad)?;
        }
        Ok((loss, grad))
    }

    /// One optimizer step on the denoising loss; returns the pre-step loss.
    pub fn fake_denoise_update(
        &mut self,
        batch: &[DenoiseSample],
        cfg: &AdamConfig,
        clip: f64,
    ) -> Result<f64> {
        let (loss, mut grad) = self.denoise_loss_grad(batch)?;
        clip_grad_norm(&mut grad, clip);
        if adam_step(&mut self.params, &mut self.opt, &grad, cfg)? == StepOutcome::SkippedNonFinite {
            return Err(Error::NonFinite("fake denoiser gradient".into()));
        }
        Ok(loss)
    }
}

impl Denoiser for FakeScoreState {
    fn denoise(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.fake_denoise(x, t, 0)
    }
}

const CHECKPOINT_MAGIC: &str = "gndm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters and optimizer state as versioned text. Values use
/// Rust's shortest round-trip float formatting, so reads are bit-exact.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    kind: &str,
    params: &MlpParams,
    opt: &AdamState,
) -> std::io::Result<()> {
    let a = params.arch();
    writeln!(w, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}")?;
    writeln!(w, "kind {kind}")?;
    writeln!(w, "data_dim {}", a.data_dim)?;
    writeln!(w, "cond_dim {}", a.cond_dim)?;
    writeln!(w, "hidden {}", a.hidden)?;
    writeln!(w, "layers {}", a.layers)?;
    writeln!(w, "residual {}", a.residual as u8)?;
    writeln!(w, "step {}", opt.step)?;
    for (name, vals) in [("params", params.values()), ("adam_m", &opt.m), ("adam_v", &opt.v)] {
        writeln!(w, "{name} {}", vals.len())?;
        for v in vals {
            writeln!(w, "{v:?}")?;
        }
    }
    Ok(())
}

fn next_line<R: BufRead>(lines: &mut std::io::Lines<R>) -> Result<String> {
    lines
        .next()
        .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

fn next_field<R: BufRead>(lines: &mut std::io::Lines<R>, name: &str) -> Result<String> {
    let line = next_line(lines)?;
    let (k, v) = line
        .split_once(' ')
        .ok_or_else(|| Error::Checkpoint(format!("malformed line {line:?}")))?;
    if k != name {
        return Err(Error::Checkpoint(format!("expected {name}, found {k}")));
    }
    Ok(v.to_string())
}

pub fn read_checkpoint<R: BufRead>(r: R, expected_kind: &str) -> Result<(MlpParams, AdamState)> {
    let mut lines = r.lines();
    let header = next_line(&mut lines)?;
    if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Checkpoint(format!("unsupported header {header:?}")));
    }
    let mut field = |name: &str| next_field(&mut lines, name);
    let num = |s: String| -> Result<usize> {
        s.parse().map_err(|_| Error::Checkpoint(format!("bad integer {s:?}")))
    };
    let kind = field("kind")?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!("expected a {expected_kind} checkpoint, found {kind}")));
    }
    let arch = MlpArch {
        data_dim: num(field("data_dim")?)?,
        cond_dim: num(field("cond_dim")?)?,
        hidden: num(field("hidden")?)?,
        layers: num(field("layers")?)?,
        residual: num(field("residual")?)? != 0,
    };
    let step = num(field("step")?)? as u64;
    let mut blocks = Vec::new();
    drop(field);
    for name in ["params", "adam_m", "adam_v"] {
        let n = num(next_field(&mut lines, name)?)?;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next_line(&mut lines)?;
            vals.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("bad number {line:?}")))?,
            );
        }
        blocks.push(vals);
    }
    let v = blocks.pop().unwrap();
    let m = blocks.pop().unwrap();
    let params = MlpParams::from_values(arch, blocks.pop().unwrap())?;
    if m.len() != params.values().len() || v.len() != m.len() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    check_finite("optimizer state", &m)?;
    Ok((params, AdamState { m, v, step }))
}
