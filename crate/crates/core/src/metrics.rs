//! Sample-set distances and training diagnostics.

use crate::error::{check_len, Error, Result};
use crate::numerics::RngStream;
use crate::schedule::forward_diffuse;
use crate::teacher::{Denoiser, GmmSpec};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    crate::numerics::sq_dist(a, b).sqrt()
}

fn check_set(name: &str, s: &[Vec<f64>]) -> Result<usize> {
    if s.is_empty() {
        return Err(Error::Domain(format!("{name} sample set is empty")));
    }
    let d = s[0].len();
    for x in s {
        check_len("sample dimension", d, x.len())?;
    }
    Ok(d)
}

/// Mean pairwise distance within a set over all ordered pairs. Summed in
/// the same order as [`cross_term`] so identical sets cancel exactly.
fn self_term(a: &[Vec<f64>]) -> f64 {
    cross_term(a, a)
}

fn cross_term(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += euclid(x, y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all pairs (V-statistic, so the
/// result is exactly 0 for identical sets and never negative).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let da = check_set("first", a)?;
    let db = check_set("second", b)?;
    check_len("energy distance dimension", da, db)?;
    Ok((2.0 * cross_term(a, b) - self_term(a) - self_term(b)).max(0.0))
}

/// A fixed sample set with its within-set term precomputed.
#[derive(Clone, Debug)]
pub struct EnergyReference {
    samples: Vec<Vec<f64>>,
    self_term: f64,
}

impl EnergyReference {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        check_set("reference", &samples)?;
        let self_term = self_term(&samples);
        Ok(Self { samples, self_term })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn distance(&self, other: &[Vec<f64>]) -> Result<f64> {
        let d = check_set("compared", other)?;
        check_len("energy distance dimension", self.samples[0].len(), d)?;
        Ok((2.0 * cross_term(other, &self.samples) - self_term(other) - self.self_term).max(0.0))
    }
}

/// Fraction of samples assigned to each component by nearest mean under the
/// component variance. Sums to exactly 1.
pub fn mode_coverage(samples: &[Vec<f64>], spec: &GmmSpec) -> Vec<f64> {
    let k = spec.num_components();
    let mut counts = vec![0usize; k];
    for x in samples {
        counts[spec.nearest_component(x)] += 1;
    }
    if samples.is_empty() {
        return vec![0.0; k];
    }
    let n = samples.len() as f64;
    let mut frac: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    // absorb rounding into the largest entry
    let big = (0..k).max_by(|&a, &b| frac[a].total_cmp(&frac[b])).unwrap_or(0);
    for _ in 0..4 {
        let s: f64 = frac.iter().sum();
        if s == 1.0 {
            break;
        }
        frac[big] += 1.0 - s;
    }
    frac
}

/// For each `t'`, the per-coordinate standard deviation of
/// `teacher(x_t') - fake(x_t')` across `n` forward-diffusion draws,
/// averaged over coordinates and over the `x0` batch.
pub fn rs_variance_curve(
    teacher: &dyn Denoiser,
    fake: &dyn Denoiser,
    x0: &[Vec<f64>],
    tprimes: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::Domain(format!("variance needs at least 2 resamples, got {n}")));
    }
    let d = check_set("x0", x0)?;
    if tprimes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("diffused timesteps must be sorted ascending".into()));
    }
    let mut out = Vec::with_capacity(tprimes.len());
    for &tp in tprimes {
        let mut total = 0.0;
        for x in x0 {
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for _ in 0..n {
                let noisy = forward_diffuse(x, tp, &rng.randn(d))?;
                let a = teacher.denoise(&noisy, tp)?;
                let b = fake.denoise(&noisy, tp)?;
                for j in 0..d {
                    let r = a[j] - b[j];
                    sum[j] += r;
                    sq[j] += r * r;
                }
            }
            for j in 0..d {
                let mean = sum[j] / n as f64;
                let var = ((sq[j] - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
                total += var.sqrt();
            }
        }
        out.push((tp, total / (x0.len() * d) as f64));
    }
    Ok(out)
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub energy_dist: f64,
    /// Distance to a frozen reference student; NaN when none is configured.
    pub energy_dist_sd: f64,
    pub coverage: Vec<f64>,
    pub aux_reward_mean: f64,
    pub rs_abs_mean: f64,
    pub clip_frac: f64,
    pub ratio_mean: f64,
    pub beta_dm_mean: f64,
    pub samples: u64,
    pub wall_ms: u64,
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.8}")
    }
}

fn parse_num(s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::config(format!("bad number {s:?} in metrics row"))),
    }
}

impl MetricsRow {
    pub fn csv_header(num_modes: usize) -> String {
        let mut cols = vec!["iter".to_string(), "energy_dist".into(), "energy_dist_sd".into()];
        cols.extend((0..num_modes).map(|k| format!("coverage_{k}")));
        cols.extend(
            [
                "aux_reward_mean",
                "rs_abs_mean",
                "clip_frac",
                "ratio_mean",
                "beta_dm_mean",
                "samples",
                "wall_ms",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![
            self.iter.to_string(),
            fmt_num(self.energy_dist),
            fmt_num(self.energy_dist_sd),
        ];
        cols.extend(self.coverage.iter().map(|v| fmt_num(*v)));
        cols.extend(
            [
                self.aux_reward_mean,
                self.rs_abs_mean,
                self.clip_frac,
                self.ratio_mean,
                self.beta_dm_mean,
            ]
            .map(fmt_num),
        );
        cols.push(self.samples.to_string());
        cols.push(self.wall_ms.to_string());
        cols.join(",")
    }

    pub fn from_csv(line: &str, num_modes: usize) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != num_modes + 10 {
            return Err(Error::config(format!(
                "metrics row has {} fields, expected {}",
                f.len(),
                num_modes + 10
            )));
        }
        let int = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::config(format!("bad integer {s:?} in metrics row")))
        };
        let k = num_modes;
        Ok(Self {
            iter: int(f[0])? as usize,
            energy_dist: parse_num(f[1])?,
            energy_dist_sd: parse_num(f[2])?,
            coverage: f[3..3 + k].iter().map(|s| parse_num(s)).collect::<Result<_>>()?,
            aux_reward_mean: parse_num(f[3 + k])?,
            rs_abs_mean: parse_num(f[4 + k])?,
            clip_frac: parse_num(f[5 + k])?,
            ratio_mean: parse_num(f[6 + k])?,
            beta_dm_mean: parse_num(f[7 + k])?,
            samples: int(f[8 + k])?,
            wall_ms: int(f[9 + k])?,
        })
    }
}
