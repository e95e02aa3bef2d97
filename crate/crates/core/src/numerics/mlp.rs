//! Fixed-architecture tanh MLP with an explicit reverse pass.
//!
//! Input is the concatenation `[x, time features(t), one-hot(c)]`; the
//! network has `layers` hidden tanh layers of width `hidden` and a linear
//! output of width `data_dim`. With `residual` set, `x` is added to the
//! output so that a zero output layer is the identity map.
//!
//! Parameters live in one flat buffer, layer by layer, each layer storing
//! its row-major `[out][in]` weight followed by its bias.

use super::RngStream;
use crate::error::{check_finite, check_len, Error, Result};

/// Number of sinusoidal time features, frequencies `2^0 .. 2^7`.
pub const TIME_FEATURES: usize = 8;

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for (k, v) in out.iter_mut().enumerate() {
        *v = ((1u32 << k) as f64 * t).sin();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers; 0 gives a single linear layer.
    pub layers: usize,
    pub residual: bool,
}

impl MlpArch {
    /// Two hidden layers of 64 tanh units with the residual skip.
    pub fn standard(data_dim: usize) -> Self {
        Self {
            data_dim,
            cond_dim: 1,
            hidden: 64,
            layers: 2,
            residual: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + TIME_FEATURES + self.cond_dim
    }

    /// `(out, in)` for every layer including the output layer.
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.layers {
            shapes.push((self.hidden, fan_in));
            fan_in = self.hidden;
        }
        shapes.push((self.data_dim, fan_in));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_dim == 0 {
            return Err(Error::Domain("data_dim and cond_dim must be positive".into()));
        }
        if self.layers > 0 && self.hidden == 0 {
            return Err(Error::Domain("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    out: usize,
    inp: usize,
    w: usize,
    b: usize,
}

fn spans(arch: &MlpArch) -> Vec<LayerSpan> {
    let mut off = 0;
    arch.shapes()
        .into_iter()
        .map(|(out, inp)| {
            let span = LayerSpan {
                out,
                inp,
                w: off,
                b: off + out * inp,
            };
            off += out * inp + out;
            span
        })
        .collect()
}

/// Network parameters (generator θ or fake denoiser ψ).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    arch: MlpArch,
    values: Vec<f64>,
}

/// Gradient buffer congruent with an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    arch: MlpArch,
    values: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by the reverse pass.
#[derive(Clone, Debug)]
pub struct Trace {
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            values: vec![0.0; arch.num_params()],
        })
    }

    /// Glorot-uniform hidden layers, zero biases, and an output layer drawn
    /// from `N(0, output_scale^2)`. With the residual skip this is the
    /// identity map plus a perturbation of order `output_scale`.
    pub fn init(arch: MlpArch, rng: &mut RngStream, output_scale: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let spans = spans(&arch);
        let last = spans.len() - 1;
        for (l, s) in spans.iter().enumerate() {
            let w = &mut p.values[s.w..s.b];
            if l == last {
                w.iter_mut().for_each(|v| *v = output_scale * rng.normal());
            } else {
                let limit = (6.0 / (s.inp + s.out) as f64).sqrt();
                w.iter_mut()
                    .for_each(|v| *v = rng.uniform_in(-limit, limit));
            }
        }
        Ok(p)
    }

    /// Every weight and bias drawn from `N(0, std^2)`.
    pub fn random_normal(arch: MlpArch, rng: &mut RngStream, std: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        p.values.iter_mut().for_each(|v| *v = std * rng.normal());
        Ok(p)
    }

    pub fn from_values(arch: MlpArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len("MlpParams::from_values", arch.num_params(), values.len())?;
        check_finite("parameters", &values)?;
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive FNV-1a hash of the raw parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn build_input(&self, x: &[f64], t: f64, c: usize) -> Result<Vec<f64>> {
        check_len("mlp input", self.arch.data_dim, x.len())?;
        check_finite("mlp input", x)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
        }
        if c >= self.arch.cond_dim {
            return Err(Error::Domain(format!(
                "condition {c} out of range for width {}",
                self.arch.cond_dim
            )));
        }
        let mut z = Vec::with_capacity(self.arch.input_dim());
        z.extend_from_slice(x);
        z.extend_from_slice(&time_features(t));
        z.extend((0..self.arch.cond_dim).map(|k| if k == c { 1.0 } else { 0.0 }));
        Ok(z)
    }

    pub fn forward(&self, x: &[f64], t: f64, c: usize) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x, t, c)?.output)
    }

    pub fn forward_trace(&self, x: &[f64], t: f64, c: usize) -> Result<Trace> {
        let input = self.build_input(x, t, c)?;
        let spans = spans(&self.arch);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.arch.layers);
        let mut output = Vec::new();
        for (l, s) in spans.iter().enumerate() {
            let prev: &[f64] = if l == 0 { &input } else { &hidden[l - 1] };
            let w = &self.values[s.w..s.b];
            let b = &self.values[s.b..s.b + s.out];
            let mut a: Vec<f64> = (0..s.out)
                .map(|o| {
                    let row = &w[o * s.inp..(o + 1) * s.inp];
                    b[o] + row.iter().zip(prev).map(|(wi, pi)| wi * pi).sum::<f64>()
                })
                .collect();
            if l < self.arch.layers {
                a.iter_mut().for_each(|v| *v = v.tanh());
                hidden.push(a);
            } else {
                output = a;
            }
        }
        if self.arch.residual {
            output.iter_mut().zip(x).for_each(|(o, xi)| *o += xi);
        }
        check_finite("mlp output", &output)?;
        Ok(Trace {
            input,
            hidden,
            output,
        })
    }

    /// Accumulates `d(upstream . output)/d params` for the pass in `trace`.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], grad: &mut MlpGrad) -> Result<()> {
        check_len("mlp upstream", self.arch.data_dim, upstream.len())?;
        if grad.arch != self.arch {
            return Err(Error::Shape {
                context: "mlp gradient buffer",
                expected: self.arch.num_params(),
                got: grad.values.len(),
            });
        }
        let spans = spans(&self.arch);
        let mut delta = upstream.to_vec();
        for l in (0..spans.len()).rev() {
            let s = spans[l];
            let prev: &[f64] = if l == 0 {
                &trace.input
            } else {
                &trace.hidden[l - 1]
            };
            {
                let gw = &mut grad.values[s.w..s.b];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * s.inp..(o + 1) * s.inp];
                    row.iter_mut().zip(prev).for_each(|(g, p)| *g += d * p);
                }
            }
            grad.values[s.b..s.b + s.out]
                .iter_mut()
                .zip(&delta)
                .for_each(|(g, d)| *g += d);
            if l > 0 {
                let w = &self.values[s.w..s.b];
                let mut next = vec![0.0; s.inp];
                for (o, d) in delta.iter().enumerate() {
                    let row = &w[o * s.inp..(o + 1) * s.inp];
                    next.iter_mut().zip(row).for_each(|(n, wi)| *n += wi * d);
                }
                next.iter_mut()
                    .zip(prev)
                    .for_each(|(n, a)| *n *= 1.0 - a * a);
                delta = next;
            }
        }
        Ok(())
    }

    pub fn backward(&self, x: &[f64], t: f64, c: usize, upstream: &[f64]) -> Result<MlpGrad> {
        check_finite("mlp upstream", upstream)?;
        let trace = self.forward_trace(x, t, c)?;
        let mut grad = MlpGrad::zeros(self.arch);
        self.backward_into(&trace, upstream, &mut grad)?;
        Ok(grad)
    }
}

impl MlpGrad {
    pub fn zeros(arch: MlpArch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.num_params()],
        }
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn add_assign(&mut self, other: &MlpGrad) -> Result<()> {
        check_len("gradient add", self.values.len(), other.values.len())?;
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Central differences at step `1e-5` carry roughly `1e-11` absolute
/// roundoff, so entries smaller than this are compared absolutely.
pub const FD_SCALE_FLOOR: f64 = 1e-6;

/// Largest relative discrepancy between the analytic gradient of
/// `upstream . f(params)` and central differences with the given step.
pub fn fd_check(
    params: &MlpParams,
    x: &[f64],
    t: f64,
    c: usize,
    upstream: &[f64],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let analytic = params.backward(x, t, c, upstream)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let plus = super::dot(upstream, &probe.forward(x, t, c)?);
        probe.values[i] = orig - step;
        let minus = super::dot(upstream, &probe.forward(x, t, c)?);
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.values[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(FD_SCALE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(d: usize, layers: usize, residual: bool) -> MlpArch {
        MlpArch {
            data_dim: d,
            cond_dim: 1,
            hidden: 16,
            layers,
            residual,
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams::zeros(arch(3, 2, false)).unwrap();
        assert_eq!(p.forward(&[0.4, -1.0, 2.0], 0.3, 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn residual_identity() {
        let p = MlpParams::zeros(MlpArch::standard(2)).unwrap();
        assert_eq!(p.forward(&[0.3, -0.7], 0.5, 0).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = MlpParams::zeros(MlpArch::standard(2)).unwrap();
        assert!(p.forward(&[f64::NAN, 0.0], 0.5, 0).is_err());
        assert!(p.forward(&[0.0, 0.0], 1.5, 0).is_err());
        assert!(p.forward(&[0.0], 0.5, 0).is_err());
        assert!(p.forward(&[0.0, 0.0], 0.5, 1).is_err());
        assert!(p.backward(&[0.0, 0.0], 0.5, 0, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let mut rng = RngStream::new(1, 0);
        let p = MlpParams::random_normal(arch(2, 2, true), &mut rng, 0.5).unwrap();
        let g = p.backward(&[0.1, 0.2], 0.4, 0, &[0.0, 0.0]).unwrap();
        assert!(g.values().iter().all(|v| *v == 0.0));
        assert_eq!(fd_check(&p, &[0.1, 0.2], 0.4, 0, &[0.0, 0.0], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer_outer_product() {
        let mut rng = RngStream::new(5, 0);
        let a = arch(2, 0, false);
        let p = MlpParams::random_normal(a, &mut rng, 1.0).unwrap();
        let x = [0.5, -1.5];
        let t = 0.25;
        let u = [2.0, -3.0];
        let g = p.backward(&x, t, 0, &u).unwrap();
        let mut v = x.to_vec();
        v.extend_from_slice(&time_features(t));
        v.push(1.0);
        let n_in = a.input_dim();
        for o in 0..2 {
            for i in 0..n_in {
                assert_eq!(g.values()[o * n_in + i], u[o] * v[i]);
            }
            assert_eq!(g.values()[2 * n_in + o], u[o]);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = RngStream::new(11, 0);
        let p = MlpParams::random_normal(arch(3, 2, true), &mut rng, 0.4).unwrap();
        let x = rng.randn(3);
        let u1 = rng.randn(3);
        let u2 = rng.randn(3);
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let mut g12 = p.backward(&x, 0.6, 0, &u1).unwrap();
        g12.add_assign(&p.backward(&x, 0.6, 0, &u2).unwrap()).unwrap();
        let g = p.backward(&x, 0.6, 0, &sum).unwrap();
        for (a, b) in g.values().iter().zip(g12.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = RngStream::new(3, 0);
        let p = MlpParams::init(MlpArch::standard(2), &mut rng, 0.5).unwrap();
        let a = p.forward(&[1.0, 2.0], 0.75, 0).unwrap();
        let b = p.forward(&[1.0, 2.0], 0.75, 0).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn fd_matches_on_random_instance() {
        let mut rng = RngStream::new(99, 0);
        let p = MlpParams::random_normal(arch(2, 2, true), &mut rng, 0.5).unwrap();
        let err = fd_check(&p, &[0.3, -0.8], 0.37, 0, &[1.0, -0.5], 1e-5).unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }

    #[test]
    fn coarse_step_shows_truncation_error() {
        let mut rng = RngStream::new(99, 0);
        let p = MlpParams::random_normal(arch(2, 2, true), &mut rng, 0.5).unwrap();
        let err = fd_check(&p, &[0.3, -0.8], 0.37, 0, &[1.0, -0.5], 1.0).unwrap();
        eprintln!("fd error at step 1.0: {err:.3e}");
        assert!(fd_check(&p, &[0.3, -0.8], 0.37, 0, &[1.0, -0.5], 0.0).is_err());
    }
}
