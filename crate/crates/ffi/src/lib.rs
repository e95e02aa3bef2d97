//! C ABI over the `gndm` library.
//!
//! Objects are opaque handles created by `*_new` functions and released by
//! the matching `*_free`. Every fallible call returns a [`GndmStatus`]; on
//! failure a description is available from [`gndm_last_error`] on the same
//! thread until the next failing call. Arrays are row-major `double`
//! buffers whose lengths are passed explicitly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gndm::harness::RawConfig;
use gndm::metrics::energy_distance;
use gndm::numerics::RngStream;
use gndm::teacher::{Denoiser, GmmSpec};
use gndm::trainer::{sample_trajectory, Trainer};
use gndm::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GndmStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    Shape = 3,
    NonFinite = 4,
    Degenerate = 5,
    Config = 6,
    Io = 7,
    Checkpoint = 8,
    Utf8 = 9,
    Panic = 10,
}

impl From<&Error> for GndmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => GndmStatus::Domain,
            Error::Shape { .. } => GndmStatus::Shape,
            Error::NonFinite(_) => GndmStatus::NonFinite,
            Error::Degenerate(_) => GndmStatus::Degenerate,
            Error::Config { .. } => GndmStatus::Config,
            Error::Io { .. } => GndmStatus::Io,
            Error::Checkpoint(_) => GndmStatus::Checkpoint,
        }
    }
}

/// A Gaussian-mixture teacher.
pub struct GndmTeacher {
    spec: GmmSpec,
}

/// A training run held in memory.
pub struct GndmTrainer {
    trainer: Trainer,
}

/// Evaluation of the current student.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GndmMetrics {
    pub iter: u64,
    pub energy_dist: f64,
    /// NaN when no auxiliary reward is configured.
    pub aux_reward_mean: f64,
    /// Smallest per-mode coverage fraction.
    pub min_coverage: f64,
    pub samples: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Utf8,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status and last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GndmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GndmStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            GndmStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            GndmStatus::from(&e)
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string argument is not valid UTF-8".into());
            GndmStatus::Utf8
        }
        Err(_) => {
            set_error("internal panic".into());
            GndmStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(v);
    Ok(())
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|c| c.to_vec()).collect()
}

/// Last error on this thread, or null. Valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn gndm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn gndm_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gndm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Equal-weight ring of `k` isotropic components in 2D.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_ring(k: usize, radius: f64, variance: f64, out: *mut *mut GndmTeacher) -> GndmStatus {
    guard(|| {
        let spec = GmmSpec::ring(k, radius, variance)?;
        put(out, Box::into_raw(Box::new(GndmTeacher { spec })), "out")
    })
}

/// General mixture: `weights[k]`, `means[k * d]`, `variances[k]`.
///
/// # Safety
/// Array pointers must reference the stated number of doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_new(
    k: usize,
    d: usize,
    weights: *const f64,
    means: *const f64,
    variances: *const f64,
    out: *mut *mut GndmTeacher,
) -> GndmStatus {
    guard(|| {
        let w = slice(weights, k, "weights")?.to_vec();
        let m = slice(means, k.saturating_mul(d), "means")?;
        let v = slice(variances, k, "variances")?.to_vec();
        if d == 0 {
            return Err(Error::Domain("dimension must be positive".into()).into());
        }
        let spec = GmmSpec::new(w, rows(m, d), v)?;
        put(out, Box::into_raw(Box::new(GndmTeacher { spec })), "out")
    })
}

/// # Safety
/// `teacher` must come from a teacher constructor and not be freed twice.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_free(teacher: *mut GndmTeacher) {
    if !teacher.is_null() {
        drop(Box::from_raw(teacher));
    }
}

/// # Safety
/// `teacher` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_shape(
    teacher: *const GndmTeacher,
    dim: *mut usize,
    components: *mut usize,
) -> GndmStatus {
    guard(|| {
        let t = reference(teacher, "teacher")?;
        put(dim, t.spec.dim(), "dim")?;
        put(components, t.spec.num_components(), "components")
    })
}

/// Score of the noisy marginal at time `t` in `(0, 1)`.
///
/// # Safety
/// `x` and `out` must reference `d` doubles where `d` is the teacher dimension.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_score(
    teacher: *const GndmTeacher,
    x: *const f64,
    d: usize,
    t: f64,
    out: *mut f64,
) -> GndmStatus {
    guard(|| {
        let tch = reference(teacher, "teacher")?;
        let s = tch.spec.score(slice(x, d, "x")?, t)?;
        slice_mut(out, d, "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Posterior-mean denoiser `E[x0 | x_t]`.
///
/// # Safety
/// `x` and `out` must reference `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_denoise(
    teacher: *const GndmTeacher,
    x: *const f64,
    d: usize,
    t: f64,
    out: *mut f64,
) -> GndmStatus {
    guard(|| {
        let tch = reference(teacher, "teacher")?;
        let s = tch.spec.denoise(slice(x, d, "x")?, t)?;
        slice_mut(out, d, "out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// `n` clean samples into `out[n * d]`, reproducible from `seed`.
///
/// # Safety
/// `out` must reference `n * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn gndm_teacher_sample(
    teacher: *const GndmTeacher,
    seed: u64,
    n: usize,
    out: *mut f64,
) -> GndmStatus {
    guard(|| {
        let tch = reference(teacher, "teacher")?;
        let d = tch.spec.dim();
        let buf = slice_mut(out, n.saturating_mul(d), "out")?;
        let xs = tch.spec.sample_n(&mut RngStream::new(seed, 0), n);
        for (chunk, x) in buf.chunks_mut(d).zip(xs) {
            chunk.copy_from_slice(&x);
        }
        Ok(())
    })
}

/// Energy distance between `a[na * d]` and `b[nb * d]`.
///
/// # Safety
/// Arrays must reference the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn gndm_energy_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    d: usize,
    out: *mut f64,
) -> GndmStatus {
    guard(|| {
        if d == 0 {
            return Err(Error::Domain("dimension must be positive".into()).into());
        }
        let a = rows(slice(a, na.saturating_mul(d), "a")?, d);
        let b = rows(slice(b, nb.saturating_mul(d), "b")?, d);
        put(out, energy_distance(&a, &b)?, "out")
    })
}

/// Builds a trainer from configuration text in the CLI's `key = value`
/// format. Empty text gives the defaults.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_new(config: *const c_char, out: *mut *mut GndmTrainer) -> GndmStatus {
    guard(|| {
        if config.is_null() {
            return Err(Fail::Null("config"));
        }
        let text = CStr::from_ptr(config).to_str().map_err(|_| Fail::Utf8)?;
        let cfg = RawConfig::parse(text)?.build()?;
        let trainer = Trainer::new(cfg.train)?;
        put(out, Box::into_raw(Box::new(GndmTrainer { trainer })), "out")
    })
}

/// # Safety
/// `trainer` must come from [`gndm_trainer_new`] and not be freed twice.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_free(trainer: *mut GndmTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs `rounds` training rounds. `aborted`, if non-null, receives the
/// number of rounds that were rolled back after a non-finite value.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_step(trainer: *mut GndmTrainer, rounds: usize, aborted: *mut usize) -> GndmStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or(Fail::Null("trainer"))?;
        let mut rolled_back = 0;
        for _ in 0..rounds {
            if t.trainer.step()?.aborted.is_some() {
                rolled_back += 1;
            }
        }
        if !aborted.is_null() {
            aborted.write(rolled_back);
        }
        Ok(())
    })
}

/// Completed rounds.
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_round(trainer: *const GndmTrainer, out: *mut usize) -> GndmStatus {
    guard(|| put(out, reference(trainer, "trainer")?.trainer.state.round, "out"))
}

/// Evaluates the current student against the teacher.
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_evaluate(trainer: *const GndmTrainer, out: *mut GndmMetrics) -> GndmStatus {
    guard(|| {
        let row = reference(trainer, "trainer")?.trainer.evaluate()?;
        let m = GndmMetrics {
            iter: row.iter as u64,
            energy_dist: row.energy_dist,
            aux_reward_mean: row.aux_reward_mean,
            min_coverage: row.coverage.iter().copied().fold(f64::INFINITY, f64::min),
            samples: row.samples,
        };
        put(out, m, "out")
    })
}

/// Draws `n` samples from the current student into `out[n * d]`.
///
/// # Safety
/// `trainer` must be a live handle and `out` must reference `n * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn gndm_trainer_generate(
    trainer: *const GndmTrainer,
    seed: u64,
    n: usize,
    out: *mut f64,
) -> GndmStatus {
    guard(|| {
        let t = &reference(trainer, "trainer")?.trainer;
        let d = t.cfg.teacher.dim();
        let buf = slice_mut(out, n.saturating_mul(d), "out")?;
        let mut rng = RngStream::new(seed, 0);
        for chunk in buf.chunks_mut(d) {
            let x = rng.randn(d);
            let traj = sample_trajectory(&t.state.student.params, &t.cfg.grid, 0, x, &mut rng)?;
            chunk.copy_from_slice(traj.final_state());
        }
        Ok(())
    })
}
