//! Flat `key = value` experiment configuration with `[section]` headers.
//!
//! Every key has a default, so an empty file (or the `base` preset) is a
//! complete configuration. Keys are unique across sections, which lets
//! `--set key=value` name them without a section. The `[ablate]` section is
//! different: each line names another key and lists values to cross.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nets::AdamConfig;
use crate::policy::{GrpoConfig, RatioMode, RsMode};
use crate::rewards::{BetaMode, ExternalReward};
use crate::schedule::TimeGrid;
use crate::teacher::GmmSpec;
use crate::trainer::{RdmMode, RewardSpec, TrainConfig};

struct KeySpec {
    section: &'static str,
    name: &'static str,
    default: &'static str,
}

const fn key(section: &'static str, name: &'static str, default: &'static str) -> KeySpec {
    KeySpec {
        section,
        name,
        default,
    }
}

const SECTIONS: [&str; 8] = ["run", "teacher", "grid", "train", "rewards", "eval", "diagnose", "ablate"];

const KEYS: &[KeySpec] = &[
    key("run", "seed", "0"),
    key("run", "iterations", "3000"),
    key("teacher", "teacher", "ring"),
    key("teacher", "components", "8"),
    key("teacher", "radius", "4"),
    key("teacher", "variance", "0.05"),
    key("teacher", "weights", ""),
    key("teacher", "means", ""),
    key("teacher", "variances", ""),
    key("grid", "steps", "1, 0.75, 0.5, 0.25, 0"),
    key("grid", "tprime_min", "0.02"),
    key("grid", "tprime_max", "0.98"),
    key("grid", "interval", "full"),
    key("train", "groups", "4"),
    key("train", "group_size", "8"),
    key("train", "warmup", "500"),
    key("train", "gn", "on"),
    key("train", "gn_eps", "1e-8"),
    key("train", "share_t", "on"),
    key("train", "share_tprime", "on"),
    key("train", "beta_mode", "sample"),
    key("train", "noise_init", "shared"),
    key("train", "rdm_mode", "practice"),
    key("train", "rs_mode", "denoiser"),
    key("train", "eta", "0.5"),
    key("train", "inner_updates", "1"),
    key("train", "ratio_mode", "per-dim"),
    key("train", "student_lr", "1e-4"),
    key("train", "fake_lr", "1e-3"),
    key("train", "grad_clip", "1"),
    key("train", "hidden", "64"),
    key("train", "layers", "2"),
    key("train", "init_scale", "0.01"),
    key("train", "teacher_fit", "2000"),
    key("train", "teacher_fit_batch", "64"),
    key("train", "teacher_fit_lr", "1e-3"),
    key("train", "fake_pretrain", "0"),
    key("rewards", "aux", "radial(0, 0) * 10"),
    key("eval", "eval_every", "100"),
    key("eval", "eval_samples", "4096"),
    key("eval", "teacher_samples", "4096"),
    key("eval", "checkpoint_every", "0"),
    key("eval", "wall_clock", "off"),
    key("eval", "verify_on_policy", "off"),
    key("eval", "reference_checkpoint", ""),
    key("eval", "plots", "on"),
    key("diagnose", "diag_tprimes", "0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9"),
    key("diagnose", "diag_resamples", "512"),
    key("diagnose", "diag_x0", "64"),
    key("diagnose", "diag_fake", "perturbed"),
    key("diagnose", "diag_perturb", "0.85"),
    key("diagnose", "diag_instances", "32"),
];

fn find_key(name: &str) -> Option<usize> {
    KEYS.iter().position(|k| k.name == name)
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Default,
    Line(usize),
    Override,
}

impl Origin {
    fn error(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        match self {
            Origin::Default => Error::config(format!("default {key}: {msg}")),
            Origin::Line(line) => Error::Config {
                line: *line,
                msg: format!("{key}: {msg}"),
            },
            Origin::Override => Error::config(format!("--set {key}: {msg}")),
        }
    }
}

/// One ablation axis: a key and the values to cross.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Untyped configuration: one string per known key plus the ablation grid.
#[derive(Clone, Debug)]
pub struct RawConfig {
    values: Vec<(String, Origin)>,
    pub grid: Vec<GridAxis>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.default.to_string(), Origin::Default)).collect(),
            grid: Vec::new(),
        }
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl RawConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        let mut seen = vec![false; KEYS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config {
                        line,
                        msg: format!("malformed section header {content:?}"),
                    })?
                    .trim();
                section = Some(SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| {
                    Error::Config {
                        line,
                        msg: format!("unknown section [{name}]"),
                    }
                })?);
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if section == Some("ablate") {
                cfg.add_axis(k, v, Origin::Line(line))?;
                continue;
            }
            let idx = find_key(k).ok_or_else(|| Error::Config {
                line,
                msg: format!("unknown key {k:?}"),
            })?;
            if let Some(s) = section {
                if KEYS[idx].section != s {
                    return Err(Error::Config {
                        line,
                        msg: format!("key {k:?} belongs in [{}], not [{s}]", KEYS[idx].section),
                    });
                }
            }
            if seen[idx] {
                return Err(Error::Config {
                    line,
                    msg: format!("key {k:?} set twice"),
                });
            }
            seen[idx] = true;
            cfg.values[idx] = (v.to_string(), Origin::Line(line));
        }
        Ok(cfg)
    }

    /// Reads a config file; the name `base` selects the built-in defaults.
    pub fn load(path: &str) -> Result<Self> {
        if path == "base" && !Path::new(path).exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got {assignment:?}")))?;
        self.set_value(k.trim(), v.trim(), Origin::Override)
    }

    pub fn set_value(&mut self, k: &str, v: &str, origin: Origin) -> Result<()> {
        let idx = find_key(k).ok_or_else(|| origin.error(k, "unknown key"))?;
        self.values[idx] = (v.to_string(), origin);
        Ok(())
    }

    /// Adds or replaces an ablation axis from `key=v1,v2,...`.
    pub fn add_grid(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--grid expects key=v1,v2, got {assignment:?}")))?;
        self.add_axis(k.trim(), v.trim(), Origin::Override)
    }

    fn add_axis(&mut self, k: &str, v: &str, origin: Origin) -> Result<()> {
        if find_key(k).is_none() {
            return Err(origin.error(k, "unknown ablation key"));
        }
        let values = split_list(v);
        if values.is_empty() {
            return Err(origin.error(k, "ablation axis lists no values"));
        }
        self.grid.retain(|a| a.key != k);
        self.grid.push(GridAxis {
            key: k.to_string(),
            values,
        });
        Ok(())
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        find_key(k).map(|i| self.values[i].0.as_str())
    }

    /// Fully resolved configuration in parseable form, without the grid.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for s in SECTIONS.iter().filter(|s| **s != "ablate") {
            out.push_str(&format!("[{s}]\n"));
            for (i, k) in KEYS.iter().enumerate().filter(|(_, k)| k.section == *s) {
                out.push_str(&format!("{} = {}\n", k.name, self.values[i].0));
            }
            out.push('\n');
        }
        out
    }

    /// Every combination of grid values, in row-major order over the axes.
    pub fn expand_grid(&self) -> Vec<Vec<(String, String)>> {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for axis in &self.grid {
            let mut next = Vec::with_capacity(combos.len() * axis.values.len());
            for c in &combos {
                for v in &axis.values {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    next.push(c);
                }
            }
            combos = next;
        }
        combos
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        Typed { raw: self }.build()
    }
}

/// Settings of the variance-curve diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseConfig {
    pub tprimes: Vec<f64>,
    pub resamples: usize,
    pub x0_count: usize,
    pub fake: DiagnoseFake,
    pub instances: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DiagnoseFake {
    /// The teacher itself.
    Teacher,
    /// The teacher with every mean scaled by the factor.
    Perturbed(f64),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub plots: bool,
    pub reference_checkpoint: Option<PathBuf>,
    pub diagnose: DiagnoseConfig,
    pub raw: RawConfig,
}

struct Typed<'a> {
    raw: &'a RawConfig,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Parses `kind(p1, p2) * w` items separated by `;`. `none` or empty gives
/// no auxiliary rewards.
pub fn parse_rewards(s: &str) -> std::result::Result<Vec<RewardSpec>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let item = item.trim();
            let open = item.find('(').ok_or(format!("reward {item:?} lacks '('"))?;
            let close = item.rfind(')').ok_or(format!("reward {item:?} lacks ')'"))?;
            if close < open {
                return Err(format!("malformed reward {item:?}"));
            }
            let kind = item[..open].trim();
            let params = split_list(&item[open + 1..close])
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| format!("bad reward parameter {p:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let rest = item[close + 1..].trim();
            let weight = if rest.is_empty() {
                1.0
            } else {
                let w = rest.strip_prefix('*').ok_or(format!("expected '* weight' after {kind}(...)"))?;
                w.trim().parse().map_err(|_| format!("bad reward weight {:?}", w.trim()))?
            };
            let reward = ExternalReward::parse(kind, &params).map_err(|e| e.to_string())?;
            Ok(RewardSpec { reward, weight })
        })
        .collect()
}

/// Named `t'` buckets for the interval ablation.
fn parse_interval(s: &str, lo: f64, hi: f64) -> Option<(f64, f64)> {
    match s {
        "full" => Some((lo, hi)),
        "low" => Some((0.02, 0.3)),
        "mid" => Some((0.3, 0.6)),
        "high" => Some((0.6, 0.98)),
        _ => {
            let (a, b) = s.split_once(':')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        }
    }
}

impl Typed<'_> {
    fn entry(&self, k: &str) -> (&str, &Origin) {
        let i = find_key(k).expect("known key");
        (&self.raw.values[i].0, &self.raw.values[i].1)
    }

    fn parse<T: std::str::FromStr>(&self, k: &str, what: &str) -> Result<T> {
        let (v, o) = self.entry(k);
        v.parse().map_err(|_| o.error(k, format!("expected {what}, got {v:?}")))
    }

    fn float(&self, k: &str) -> Result<f64> {
        let x: f64 = self.parse(k, "a number")?;
        if !x.is_finite() {
            return Err(self.entry(k).1.error(k, "must be finite"));
        }
        Ok(x)
    }

    fn int(&self, k: &str) -> Result<usize> {
        self.parse(k, "a non-negative integer")
    }

    fn flag(&self, k: &str) -> Result<bool> {
        let (v, o) = self.entry(k);
        parse_bool(v).ok_or_else(|| o.error(k, format!("expected on/off, got {v:?}")))
    }

    fn floats(&self, k: &str) -> Result<Vec<f64>> {
        let (v, o) = self.entry(k);
        split_list(v)
            .iter()
            .map(|x| x.parse().map_err(|_| o.error(k, format!("bad number {x:?}"))))
            .collect()
    }

    fn choice<T: Copy>(&self, k: &str, options: &[(&str, T)]) -> Result<T> {
        let (v, o) = self.entry(k);
        options
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                o.error(k, format!("expected one of {}, got {v:?}", names.join("|")))
            })
    }

    fn teacher(&self) -> Result<GmmSpec> {
        let kind = self.choice("teacher", &[("ring", true), ("mixture", false)])?;
        if kind {
            let (_, o) = self.entry("components");
            return GmmSpec::ring(self.int("components")?, self.float("radius")?, self.float("variance")?)
                .map_err(|e| o.error("teacher", e));
        }
        let weights = self.floats("weights")?;
        let variances = self.floats("variances")?;
        let (means_text, o) = self.entry("means");
        let means = means_text
            .split(';')
            .map(|m| {
                m.split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|_| o.error("means", format!("bad number {x:?}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(weights, means, variances).map_err(|e| o.error("means", e))
    }

    fn build(&self) -> Result<ExperimentConfig> {
        let teacher = self.teacher()?;
        let tprime_min = self.float("tprime_min")?;
        let tprime_max = self.float("tprime_max")?;
        let grid = TimeGrid::new(self.floats("steps")?, tprime_min, tprime_max)
            .map_err(|e| self.entry("steps").1.error("steps", e))?;
        let (iv, io) = self.entry("interval");
        let reward_tprime = parse_interval(iv, tprime_min, tprime_max)
            .ok_or_else(|| io.error("interval", format!("expected full|low|mid|high|a:b, got {iv:?}")))?;
        let (av, ao) = self.entry("aux");
        let rewards = parse_rewards(av).map_err(|e| ao.error("aux", e))?;
        let adam = |lr: f64| AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let train = TrainConfig {
            teacher,
            grid,
            reward_tprime,
            groups: self.int("groups")?,
            group_size: self.int("group_size")?,
            iterations: self.int("iterations")?,
            warmup: self.int("warmup")?,
            rewards,
            grpo: GrpoConfig {
                eta: self.float("eta")?,
                inner_updates: self.int("inner_updates")?,
                ratio_mode: self.choice(
                    "ratio_mode",
                    &[("per-dim", RatioMode::PerDim), ("per-sample", RatioMode::PerSample)],
                )?,
            },
            gn: self.flag("gn")?,
            gn_eps: self.float("gn_eps")?,
            share_t: self.flag("share_t")?,
            share_tprime: self.flag("share_tprime")?,
            beta_mode: self.choice(
                "beta_mode",
                &[("sample", BetaMode::Sample), ("pixel", BetaMode::Pixel), ("off", BetaMode::Off)],
            )?,
            shared_noise_init: self.choice("noise_init", &[("shared", true), ("random", false)])?,
            rdm_mode: self.choice("rdm_mode", &[("practice", RdmMode::Practice), ("exact", RdmMode::Exact)])?,
            rs_mode: self.choice("rs_mode", &[("denoiser", RsMode::Denoiser), ("score", RsMode::Score)])?,
            student_opt: adam(self.float("student_lr")?),
            fake_opt: adam(self.float("fake_lr")?),
            grad_clip: self.float("grad_clip")?,
            hidden: self.int("hidden")?,
            layers: self.int("layers")?,
            init_scale: self.float("init_scale")?,
            teacher_fit: self.int("teacher_fit")?,
            teacher_fit_batch: self.int("teacher_fit_batch")?,
            teacher_fit_opt: adam(self.float("teacher_fit_lr")?),
            fake_pretrain: self.int("fake_pretrain")?,
            eval_every: self.int("eval_every")?,
            eval_samples: self.int("eval_samples")?,
            teacher_samples: self.int("teacher_samples")?,
            checkpoint_every: self.int("checkpoint_every")?,
            wall_clock: self.flag("wall_clock")?,
            verify_on_policy: self.flag("verify_on_policy")?,
            seed: self.parse("seed", "a non-negative integer")?,
        };
        train.validate()?;
        let (rc, _) = self.entry("reference_checkpoint");
        let diag_fake = match self.choice("diag_fake", &[("teacher", 0), ("perturbed", 1)])? {
            0 => DiagnoseFake::Teacher,
            _ => DiagnoseFake::Perturbed(self.float("diag_perturb")?),
        };
        let tprimes = self.floats("diag_tprimes")?;
        if tprimes.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(self.entry("diag_tprimes").1.error("diag_tprimes", "values must lie in (0, 1)"));
        }
        Ok(ExperimentConfig {
            train,
            plots: self.flag("plots")?,
            reference_checkpoint: (!rc.is_empty()).then(|| PathBuf::from(rc)),
            diagnose: DiagnoseConfig {
                tprimes,
                resamples: self.int("diag_resamples")?,
                x0_count: self.int("diag_x0")?,
                fake: diag_fake,
                instances: self.int("diag_instances")?,
            },
            raw: self.raw.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let cfg = RawConfig::default().build().unwrap();
        assert_eq!(cfg.train.iterations, 3000);
        assert_eq!(cfg.train.rewards.len(), 1);
        assert_eq!(cfg.train.rewards[0].weight, 10.0);
        assert_eq!(cfg.train.reward_tprime, (0.02, 0.98));
        assert!(cfg.reference_checkpoint.is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[run]\nseed = 3\n\n[train]\ngroups = many\n";
        let err = RawConfig::parse(text).unwrap().build().unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("groups"), "{err}");
        let err = RawConfig::parse("[run]\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = RawConfig::parse("[train]\nseed = 1\n").unwrap_err().to_string();
        assert!(err.contains("belongs in [run]"), "{err}");
        assert!(RawConfig::parse("[nope]\n").is_err());
        assert!(RawConfig::parse("[run]\nseed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn overrides_and_resolved_round_trip() {
        let mut raw = RawConfig::parse("[train]\ngn = off # comment\n").unwrap();
        raw.set("seed=7").unwrap();
        raw.set("interval=mid").unwrap();
        assert!(raw.set("nonsense=1").is_err());
        let text = raw.resolved();
        let again = RawConfig::parse(&text).unwrap();
        assert_eq!(again.resolved(), text);
        let cfg = again.build().unwrap();
        assert!(!cfg.train.gn);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.reward_tprime, (0.3, 0.6));
    }

    #[test]
    fn grid_expansion() {
        let mut raw = RawConfig::parse("[ablate]\ngn = on, off\n").unwrap();
        raw.add_grid("eta=0.1,0.5,1").unwrap();
        let combos = raw.expand_grid();
        assert_eq!(combos.len(), 6);
        assert_eq!(combos[0], vec![("gn".into(), "on".into()), ("eta".into(), "0.1".into())]);
        assert!(raw.add_grid("eta=").is_err());
        assert!(raw.add_grid("nope=1").is_err());
    }

    #[test]
    fn reward_syntax() {
        let r = parse_rewards("radial(1, 2) * 10; mode(3)").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].weight, 10.0);
        assert_eq!(r[1].weight, 1.0);
        assert!(parse_rewards("none").unwrap().is_empty());
        assert!(parse_rewards("radial 1 2").is_err());
        assert!(parse_rewards("radial(1) * x").is_err());
    }

    #[test]
    fn custom_mixture() {
        let text = "[teacher]\nteacher = mixture\nweights = 0.5, 0.5\nmeans = -1 0; 1 0\nvariances = 0.1, 0.2\n[rewards]\naux = none\n";
        let cfg = RawConfig::parse(text).unwrap().build().unwrap();
        assert_eq!(cfg.train.teacher.num_components(), 2);
        assert_eq!(cfg.train.teacher.dim(), 2);
    }
}
