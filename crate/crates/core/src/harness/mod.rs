//! Command implementations behind the `gndm` binary: training runs,
//! ablation grids, diagnostics and plotting. This is the only module that
//! touches the filesystem.

pub mod checks;
pub mod config;
pub mod plot;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub use config::{DiagnoseConfig, DiagnoseFake, ExperimentConfig, GridAxis, Origin, RawConfig};
pub use plot::{emit_plot, render_svg, Series};

use crate::error::{Error, Result};
use crate::metrics::{fmt_num, rs_variance_curve, MetricsRow};
use crate::nets::read_checkpoint;
use crate::numerics::RngStream;
use crate::teacher::GmmSpec;
use crate::trainer::{eval_samples, RunSink, Trainer, TrainerState};
use checks::CheckResult;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const RESOLVED_FILE: &str = "config.resolved";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Writes metric rows to `metrics.csv` and checkpoints under `ckpt/<iter>/`.
pub struct FileSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    echo: bool,
    pub rows: Vec<MetricsRow>,
    pub incidents: Vec<(usize, String)>,
}

impl FileSink {
    /// Opens `dir/metrics.csv`. With `resume_at`, rows of an existing file
    /// with a matching header are kept up to that iteration and
    /// the file is continued; otherwise it is replaced.
    pub fn open(dir: &Path, num_modes: usize, resume_at: Option<usize>, echo: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let header = MetricsRow::csv_header(num_modes);
        let mut kept = Vec::new();
        if let (Some(round), true) = (resume_at, path.exists()) {
            let mut first = String::new();
            open(&path)?.read_line(&mut first).map_err(|e| Error::io(&path, e))?;
            if first.trim_end() != header {
                return Err(Error::Checkpoint(format!("{} has a different header", path.display())));
            }
            let (_, rows) = read_metrics(&path)?;
            kept = rows.into_iter().filter(|r| r.iter <= round).collect();
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut metrics = BufWriter::new(file);
        writeln!(metrics, "{header}").map_err(|e| Error::io(&path, e))?;
        for r in &kept {
            writeln!(metrics, "{}", r.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            echo,
            rows: kept,
            incidents: Vec::new(),
        })
    }
}

impl RunSink for FileSink {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        writeln!(self.metrics, "{}", row.to_csv())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(&path, e))?;
        if self.echo {
            println!(
                "iter {:>6}  energy_dist {:.5}  aux_reward {:.4}",
                row.iter, row.energy_dist, row.aux_reward_mean
            );
        }
        self.rows.push(row.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainerState, seed: u64) -> Result<()> {
        let dir = self.dir.join("ckpt").join(state.round.to_string());
        create_dir(&dir)?;
        write_checkpoint_dir(&dir, state, seed)
    }

    fn incident(&mut self, round: usize, msg: &str) {
        eprintln!("round {round} rolled back: {msg}");
        self.incidents.push((round, msg.to_string()));
    }
}

/// Writes `student`, `fake` and `rng` into `dir`.
pub fn write_checkpoint_dir(dir: &Path, state: &TrainerState, seed: u64) -> Result<()> {
    let files: [(&str, &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>); 3] = [
        ("student", &|w| state.write_student(w)),
        ("fake", &|w| state.write_fake(w)),
        ("rng", &|w| state.write_rng(w, seed)),
    ];
    for (name, write) in files {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_checkpoint_dir(dir: &Path, seed: u64) -> Result<TrainerState> {
    TrainerState::read(
        open(&dir.join("student"))?,
        open(&dir.join("fake"))?,
        open(&dir.join("rng"))?,
        seed,
    )
}

/// Result of one training run.
#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub incidents: Vec<(usize, String)>,
    pub checks: Vec<CheckResult>,
}

/// Reference samples for `energy_dist_sd` from a frozen student checkpoint
/// (a checkpoint directory or its `student` file).
fn reference_samples(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = if path.is_dir() { path.join("student") } else { path.to_path_buf() };
    let (params, _) = read_checkpoint(open(&file)?, "student")?;
    if params.arch() != cfg.train.arch() {
        return Err(Error::Checkpoint(format!(
            "reference {} has a different network shape",
            file.display()
        )));
    }
    eval_samples(&params, &cfg.train)
}

/// Trains one configuration into `out`, optionally resuming from a
/// checkpoint directory.
pub fn train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>, echo: bool) -> Result<RunOutcome> {
    create_dir(out)?;
    write_file(&out.join(RESOLVED_FILE), &cfg.raw.resolved())?;
    let mut trainer = match resume {
        Some(dir) => Trainer::from_state(cfg.train.clone(), read_checkpoint_dir(dir, cfg.train.seed)?)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    if let Some(path) = &cfg.reference_checkpoint {
        trainer.set_reference(reference_samples(cfg, path)?)?;
    }
    let k = cfg.train.teacher.num_components();
    let mut sink = FileSink::open(out, k, resume.map(|_| trainer.state.round), echo)?;
    trainer.run(&mut sink)?;
    let checks = checks::suite(&trainer.state, &cfg.train, 12)?;
    write_file(&out.join(SUMMARY_FILE), &summary_text(cfg, &sink.rows, &sink.incidents, &checks))?;
    if cfg.plots {
        plot_metrics(&sink.rows, k, &out.join("plots"))?;
    }
    Ok(RunOutcome {
        rows: sink.rows,
        incidents: sink.incidents,
        checks,
    })
}

fn summary_text(
    cfg: &ExperimentConfig,
    rows: &[MetricsRow],
    incidents: &[(usize, String)],
    checks: &[CheckResult],
) -> String {
    let mut s = String::new();
    s.push_str(&format!("seed {}\niterations {}\n", cfg.train.seed, cfg.train.iterations));
    if let Some(last) = rows.last() {
        s.push_str(&format!("final_iter {}\n", last.iter));
        s.push_str(&format!("final_energy_dist {}\n", fmt_num(last.energy_dist)));
        s.push_str(&format!("final_energy_dist_sd {}\n", fmt_num(last.energy_dist_sd)));
        s.push_str(&format!("final_aux_reward_mean {}\n", fmt_num(last.aux_reward_mean)));
        let cov: Vec<String> = last.coverage.iter().map(|c| format!("{c:.4}")).collect();
        s.push_str(&format!("final_coverage {}\n", cov.join(" ")));
        s.push_str(&format!("samples {}\n", last.samples));
    }
    s.push_str(&format!("rolled_back_rounds {}\n", incidents.len()));
    for (round, msg) in incidents {
        s.push_str(&format!("  round {round}: {msg}\n"));
    }
    let metrics_ok = rows
        .iter()
        .all(|r| r.energy_dist >= 0.0 && r.coverage.iter().sum::<f64>() == 1.0);
    s.push_str(&format!(
        "{} metric invariants: energy distance non-negative, coverage sums to 1\n",
        if metrics_ok { "PASS" } else { "FAIL" }
    ));
    for c in checks {
        s.push_str(&c.line());
        s.push('\n');
    }
    s
}

/// One SVG per series family under `dir`.
pub fn plot_metrics(rows: &[MetricsRow], num_modes: usize, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let col = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(|r| (r.iter as f64, f(r))).collect::<Vec<_>>();
    let families: Vec<(&str, &str, Vec<Series>)> = vec![
        (
            "energy",
            "energy distance",
            vec![
                Series::new("to teacher", col(&|r| r.energy_dist)),
                Series::new("to reference student", col(&|r| r.energy_dist_sd)),
            ],
        ),
        (
            "coverage",
            "mode coverage",
            (0..num_modes)
                .map(|k| Series::new(format!("mode {k}"), col(&|r| r.coverage.get(k).copied().unwrap_or(f64::NAN))))
                .collect(),
        ),
        ("aux_reward", "auxiliary reward", vec![Series::new("mean", col(&|r| r.aux_reward_mean))]),
        (
            "surrogate",
            "surrogate statistics",
            vec![
                Series::new("clip fraction", col(&|r| r.clip_frac)),
                Series::new("mean ratio", col(&|r| r.ratio_mean)),
            ],
        ),
        (
            "guidance",
            "guidance statistics",
            vec![
                Series::new("mean |R_s|", col(&|r| r.rs_abs_mean)),
                Series::new("beta_dm mean", col(&|r| r.beta_dm_mean)),
            ],
        ),
    ];
    for (file, title, series) in families {
        emit_plot(&series, &dir.join(format!("{file}.svg")), title, "iteration", title)?;
    }
    Ok(())
}

/// Reads a metrics file written by [`FileSink`].
pub fn read_metrics(path: &Path) -> Result<(usize, Vec<MetricsRow>)> {
    let mut lines = open(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::config(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let fields = header.trim().split(',').count();
    if fields < 10 || header.trim() != MetricsRow::csv_header(fields - 10) {
        return Err(Error::config(format!("{} does not have a metrics header", path.display())));
    }
    let k = fields - 10;
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(MetricsRow::from_csv(&line, k)?);
        }
    }
    Ok((k, rows))
}

/// Outcome of one ablation cell.
#[derive(Debug)]
pub struct AblationRun {
    pub name: String,
    pub settings: Vec<(String, String)>,
    pub result: std::result::Result<RunOutcome, String>,
}

fn run_name(settings: &[(String, String)]) -> String {
    settings
        .iter()
        .map(|(k, v)| format!("{k}-{v}"))
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Runs the cross product of the grid. A failing cell is recorded and the
/// rest continue.
pub fn ablate(raw: &RawConfig, out: &Path, echo: bool) -> Result<Vec<AblationRun>> {
    if raw.grid.is_empty() {
        return Err(Error::config("ablation grid is empty; add an [ablate] section or --grid key=v1,v2"));
    }
    raw.build()?;
    create_dir(out)?;
    let mut runs = Vec::new();
    for settings in raw.expand_grid() {
        let name = run_name(&settings);
        if echo {
            println!("== {name}");
        }
        let mut cell = raw.clone();
        cell.grid.clear();
        let result = settings
            .iter()
            .try_for_each(|(k, v)| cell.set_value(k, v, Origin::Override))
            .and_then(|_| cell.build())
            .and_then(|cfg| train(&cfg, &out.join(&name), None, echo))
            .map_err(|e| e.to_string());
        if let Err(e) = &result {
            eprintln!("run {name} failed: {e}");
        }
        runs.push(AblationRun { name, settings, result });
    }
    write_file(&out.join("runs.csv"), &runs_csv(raw, &runs))?;
    write_file(&out.join("comparison.csv"), &comparison_csv(&runs))?;
    let plots = out.join("plots");
    create_dir(&plots)?;
    for axis in &raw.grid {
        let series = axis_series(axis, &runs);
        let title = format!("energy distance by {}", axis.key);
        emit_plot(&series, &plots.join(format!("ablate_{}.svg", axis.key)), &title, "iteration", "energy distance")?;
    }
    Ok(runs)
}

fn runs_csv(raw: &RawConfig, runs: &[AblationRun]) -> String {
    let mut s = String::from("run");
    for a in &raw.grid {
        s.push(',');
        s.push_str(&a.key);
    }
    s.push_str(",status,error\n");
    for r in runs {
        s.push_str(&r.name);
        for (_, v) in &r.settings {
            s.push(',');
            s.push_str(v);
        }
        match &r.result {
            Ok(_) => s.push_str(",ok,\n"),
            Err(e) => s.push_str(&format!(",failed,\"{}\"\n", e.replace('"', "'"))),
        }
    }
    s
}

/// One row per metric, one column per run; failed runs read `nan`.
fn comparison_csv(runs: &[AblationRun]) -> String {
    type Metric = fn(&MetricsRow) -> f64;
    let metrics: [(&str, Metric); 6] = [
        ("final_energy_dist", |r| r.energy_dist),
        ("final_energy_dist_sd", |r| r.energy_dist_sd),
        ("final_aux_reward_mean", |r| r.aux_reward_mean),
        ("min_coverage", |r| r.coverage.iter().copied().fold(f64::INFINITY, f64::min)),
        ("modes_covered", |r| r.coverage.iter().filter(|c| **c > 0.01).count() as f64),
        ("samples", |r| r.samples as f64),
    ];
    let mut s = String::from("metric");
    for r in runs {
        s.push(',');
        s.push_str(&r.name);
    }
    s.push('\n');
    for (name, f) in metrics {
        s.push_str(name);
        for r in runs {
            let v = match &r.result {
                Ok(o) => o.rows.last().map(f).unwrap_or(f64::NAN),
                Err(_) => f64::NAN,
            };
            if v.is_nan() {
                s.push_str(",nan");
            } else {
                s.push_str(&format!(",{v:.8}"));
            }
        }
        s.push('\n');
    }
    s
}

/// Mean energy curve over the successful runs sharing each axis value.
fn axis_series(axis: &GridAxis, runs: &[AblationRun]) -> Vec<Series> {
    axis.values
        .iter()
        .map(|value| {
            let curves: Vec<&Vec<MetricsRow>> = runs
                .iter()
                .filter(|r| r.settings.iter().any(|(k, v)| *k == axis.key && v == value))
                .filter_map(|r| r.result.as_ref().ok().map(|o| &o.rows))
                .collect();
            let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
            let points = (0..len)
                .map(|i| {
                    let mean = curves.iter().map(|c| c[i].energy_dist).sum::<f64>() / curves.len() as f64;
                    (curves[0][i].iter as f64, mean)
                })
                .collect();
            Series::new(format!("{} = {value}", axis.key), points)
        })
        .collect()
}

/// A stand-in fake for the variance diagnostic.
pub fn diagnostic_fake(teacher: &GmmSpec, fake: DiagnoseFake) -> Result<GmmSpec> {
    match fake {
        DiagnoseFake::Teacher => Ok(teacher.clone()),
        DiagnoseFake::Perturbed(f) => GmmSpec::new(
            teacher.weights().to_vec(),
            teacher.means().iter().map(|m| m.iter().map(|v| v * f).collect()).collect(),
            teacher.variances().to_vec(),
        ),
    }
}

#[derive(Debug)]
pub struct DiagnoseOutcome {
    pub curve: Vec<(f64, f64)>,
    pub checks: Vec<CheckResult>,
}

/// Writes the guidance-variance curve and runs the invariant suite on a
/// freshly initialized student.
pub fn diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<DiagnoseOutcome> {
    create_dir(out)?;
    write_file(&out.join(RESOLVED_FILE), &cfg.raw.resolved())?;
    let d = &cfg.diagnose;
    let teacher = &cfg.train.teacher;
    let fake = diagnostic_fake(teacher, d.fake)?;
    let x0 = teacher.sample_n(&mut RngStream::new(cfg.train.seed, 21), d.x0_count);
    let curve = rs_variance_curve(
        teacher,
        &fake,
        &x0,
        &d.tprimes,
        d.resamples,
        &mut RngStream::new(cfg.train.seed, 22),
    )?;
    let mut csv = String::from("tprime,rs_std\n");
    for (t, s) in &curve {
        csv.push_str(&format!("{t:.8},{s:.8}\n"));
    }
    write_file(&out.join("variance_curve.csv"), &csv)?;
    emit_plot(
        &[Series::new("per-coordinate std", curve.clone())],
        &out.join("variance_curve.svg"),
        "guidance variance by diffused timestep",
        "t'",
        "std of R_s",
    )?;
    let state = TrainerState::init(&cfg.train)?;
    let checks = checks::suite(&state, &cfg.train, d.instances)?;
    let text: String = checks.iter().map(|c| c.line() + "\n").collect();
    write_file(&out.join("checks.txt"), &text)?;
    Ok(DiagnoseOutcome { curve, checks })
}
