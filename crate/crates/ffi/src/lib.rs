//! C interface to `cpdyn`: problems, CP factorizations and a gradient
//! descent trainer behind opaque handles.
//!
//! Every fallible call returns a [`CpdynStatus`]; on failure a message is
//! kept per thread and read back with [`cpdyn_last_error_message`]. Handles
//! are created by `*_new`/`*_random` calls and released by the matching
//! `*_free`. Buffers are caller-owned; calls that fill one take its length
//! and fail with `CPDYN_STATUS_BUFFER_TOO_SMALL` if it is short.
//!
//! Factor matrices use the crate layout: mode `n` is a row-major
//! `d_n × R` block, and multi-mode buffers concatenate the modes in order.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use cpdyn::cp::{initialize, CpFactorization, InitSpec};
use cpdyn::loss::{objective_gradient, LossKind, MeasurementSet, Observation, ObservationSet, Problem};
use cpdyn::optim::{LrScheme, TrainConfig, Trainer};
use cpdyn::{Error, Shape};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpdynStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    BufferTooSmall = 4,
    Diverged = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpdynLossKind {
    /// `z² / 2`
    HalfSquared = 0,
    /// `z²`
    Squared = 1,
    Huber = 2,
    /// Huber divided by its transition point.
    ScaledHuber = 3,
}

/// Loss selector; `delta` is read by the Huber kinds only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CpdynLoss {
    pub kind: CpdynLossKind,
    pub delta: f64,
}

impl CpdynLoss {
    fn to_kind(self) -> LossKind {
        match self.kind {
            CpdynLossKind::HalfSquared => LossKind::Squared { coeff: 0.5 },
            CpdynLossKind::Squared => LossKind::Squared { coeff: 1.0 },
            CpdynLossKind::Huber => LossKind::Huber { delta: self.delta },
            CpdynLossKind::ScaledHuber => LossKind::ScaledHuber { delta: self.delta },
        }
    }
}

/// Completion or sensing objective.
pub struct CpdynProblem {
    inner: Arc<Problem>,
}

pub struct CpdynFactorization {
    inner: CpFactorization,
}

pub struct CpdynTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> CpdynStatus {
    match err {
        Error::InvalidShape(_)
        | Error::ShapeMismatch { .. }
        | Error::ModeOutOfRange { .. }
        | Error::IndexOutOfRange { .. } => CpdynStatus::ShapeMismatch,
        Error::Divergence { .. } | Error::NonFinite(_) => CpdynStatus::Diverged,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Idx { .. } => CpdynStatus::Io,
        _ => CpdynStatus::InvalidArgument,
    }
}

/// Failure carried to the boundary: a status and its message.
struct Fail(CpdynStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CpdynStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> CpdynStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CpdynStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CpdynStatus::Internal
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), Fail> {
    if len < src.len() {
        return Err(Fail(
            CpdynStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if buf.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    Ok(())
}

unsafe fn shape_in(dims: *const usize, order: usize) -> Result<Shape, Fail> {
    Ok(Shape::new(slice_in(dims, order, "dims")?.to_vec())?)
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Bytes needed for the last error message including its terminator, or 0
/// when the last call succeeded.
#[no_mangle]
pub extern "C" fn cpdyn_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |s| s.as_bytes_with_nul().len()))
}

/// Copies the last error message into `buf`. Returns the message length
/// without terminator, 0 if there is none, or -1 if `len` is too small.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_last_error_message(buf: *mut c_char, len: usize) -> isize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if buf.is_null() || len < bytes.len() {
                return -1;
            }
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
            (bytes.len() - 1) as isize
        }
    })
}

/// Completion problem from `count` observed entries; `indices` holds
/// `count × order` coordinates.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_completion_new(
    dims: *const usize,
    order: usize,
    indices: *const usize,
    values: *const f64,
    count: usize,
    out: *mut *mut CpdynProblem,
) -> CpdynStatus {
    guard(|| {
        let shape = shape_in(dims, order)?;
        let idx = slice_in(indices, count * order, "indices")?;
        let vals = slice_in(values, count, "values")?;
        let entries = vals
            .iter()
            .enumerate()
            .map(|(k, &value)| Observation {
                index: idx[k * order..(k + 1) * order].to_vec(),
                value,
            })
            .collect();
        let obs = ObservationSet::new(shape, entries)?;
        store(
            out,
            CpdynProblem {
                inner: Arc::new(Problem::Completion(obs)),
            },
        )
    })
}

/// Sensing problem from `count` row-major measurement tensors stacked in
/// `sensors` and their values.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_sensing_new(
    dims: *const usize,
    order: usize,
    sensors: *const f64,
    values: *const f64,
    count: usize,
    out: *mut *mut CpdynProblem,
) -> CpdynStatus {
    guard(|| {
        let shape = shape_in(dims, order)?;
        let a = slice_in(sensors, count * shape.numel(), "sensors")?;
        let y = slice_in(values, count, "values")?;
        let meas = MeasurementSet::from_flat(shape, a.to_vec(), y.to_vec())?;
        store(
            out,
            CpdynProblem {
                inner: Arc::new(Problem::Sensing(meas)),
            },
        )
    })
}

/// # Safety
/// `p` must come from a problem constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_problem_free(p: *mut CpdynProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Gaussian factors with the given entry std; `balanced` rescales each
/// component to equal vector norms.
///
/// # Safety
/// `dims` must hold `order` values.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_random(
    dims: *const usize,
    order: usize,
    rank: usize,
    std: f64,
    balanced: bool,
    seed: u64,
    out: *mut *mut CpdynFactorization,
) -> CpdynStatus {
    guard(|| {
        let shape = shape_in(dims, order)?;
        let spec = if balanced {
            InitSpec::balanced_gaussian(std, seed)
        } else {
            InitSpec::gaussian(std, seed)
        };
        store(
            out,
            CpdynFactorization {
                inner: initialize(&spec, &shape, rank)?,
            },
        )
    })
}

/// Factorization from concatenated factor matrices (`Σ_n d_n · rank`
/// values).
///
/// # Safety
/// `dims` must hold `order` values and `factors` the stated count.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_from_factors(
    dims: *const usize,
    order: usize,
    rank: usize,
    factors: *const f64,
    len: usize,
    out: *mut *mut CpdynFactorization,
) -> CpdynStatus {
    guard(|| {
        let shape = shape_in(dims, order)?;
        let need: usize = shape.dims().iter().sum::<usize>() * rank;
        if len != need {
            return Err(Fail(
                CpdynStatus::ShapeMismatch,
                format!("expected {need} factor entries, got {len}"),
            ));
        }
        let data = slice_in(factors, len, "factors")?;
        let mut weights = vec![Vec::with_capacity(order); rank];
        let mut offset = 0;
        for &d in shape.dims() {
            let block = &data[offset..offset + d * rank];
            for (r, comp) in weights.iter_mut().enumerate() {
                comp.push((0..d).map(|i| block[i * rank + r]).collect());
            }
            offset += d * rank;
        }
        store(
            out,
            CpdynFactorization {
                inner: CpFactorization::from_weights(shape, weights)?,
            },
        )
    })
}

/// # Safety
/// `f` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_rank(f: *const CpdynFactorization) -> usize {
    f.as_ref().map_or(0, |f| f.inner.rank())
}

/// # Safety
/// `f` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_order(f: *const CpdynFactorization) -> usize {
    f.as_ref().map_or(0, |f| f.inner.order())
}

/// Copies the `d_n × R` factor matrix of mode `mode`.
///
/// # Safety
/// `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_factor(
    f: *const CpdynFactorization,
    mode: usize,
    buf: *mut f64,
    len: usize,
) -> CpdynStatus {
    guard(|| {
        let f = &borrow(f, "factorization")?.inner;
        if mode >= f.order() {
            return Err(Error::ModeOutOfRange { mode, order: f.order() }.into());
        }
        write_out(f.factor(mode), buf, len)
    })
}

/// Component norms `σ_r`, one per component.
///
/// # Safety
/// `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_component_norms(
    f: *const CpdynFactorization,
    buf: *mut f64,
    len: usize,
) -> CpdynStatus {
    guard(|| write_out(&borrow(f, "factorization")?.inner.component_norms(), buf, len))
}

/// The dense end tensor, row-major.
///
/// # Safety
/// `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_end_tensor(
    f: *const CpdynFactorization,
    buf: *mut f64,
    len: usize,
) -> CpdynStatus {
    guard(|| write_out(borrow(f, "factorization")?.inner.end_tensor().data(), buf, len))
}

/// Largest gap between squared vector norms within a component.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_unbalancedness(
    f: *const CpdynFactorization,
    out: *mut f64,
) -> CpdynStatus {
    guard(|| {
        let v = borrow(f, "factorization")?.inner.unbalancedness_magnitude();
        write_out(&[v], out, 1)
    })
}

/// # Safety
/// `f` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_factorization_free(f: *mut CpdynFactorization) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Objective value.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_loss(
    f: *const CpdynFactorization,
    p: *const CpdynProblem,
    loss: CpdynLoss,
    out: *mut f64,
) -> CpdynStatus {
    guard(|| {
        let kind = loss.to_kind();
        kind.validate()?;
        let v = borrow(p, "problem")?.inner.loss(&borrow(f, "factorization")?.inner, kind)?;
        write_out(&[v], out, 1)
    })
}

/// Objective gradient in the concatenated factor layout.
///
/// # Safety
/// Handles must be live; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_gradient(
    f: *const CpdynFactorization,
    p: *const CpdynProblem,
    loss: CpdynLoss,
    buf: *mut f64,
    len: usize,
) -> CpdynStatus {
    guard(|| {
        let kind = loss.to_kind();
        kind.validate()?;
        let f = &borrow(f, "factorization")?.inner;
        let g = objective_gradient(f, &borrow(p, "problem")?.inner, kind)?;
        let flat: Vec<f64> = (0..f.order()).flat_map(|n| g.factor(n).iter().copied()).collect();
        write_out(&flat, buf, len)
    })
}

/// `⟨−∇L, unit component tensor r⟩`, zero for a component with a zero
/// vector.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_gamma(
    f: *const CpdynFactorization,
    p: *const CpdynProblem,
    loss: CpdynLoss,
    component: usize,
    out: *mut f64,
) -> CpdynStatus {
    guard(|| {
        let kind = loss.to_kind();
        kind.validate()?;
        let v = cpdyn::dynamics::gamma(
            &borrow(f, "factorization")?.inner,
            &borrow(p, "problem")?.inner,
            kind,
            component,
        )?;
        write_out(&[v], out, 1)
    })
}

/// Trainer over copies of `f` and `p`. `adaptive` selects the
/// running-average step size with base `lr`; otherwise `lr` is fixed.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_new(
    f: *const CpdynFactorization,
    p: *const CpdynProblem,
    loss: CpdynLoss,
    lr: f64,
    adaptive: bool,
    out: *mut *mut CpdynTrainer,
) -> CpdynStatus {
    guard(|| {
        let scheme = if adaptive {
            match LrScheme::adaptive() {
                LrScheme::Adaptive { beta, eps, .. } => LrScheme::Adaptive { base_lr: lr, beta, eps },
                other => other,
            }
        } else {
            LrScheme::Fixed { lr }
        };
        let config = TrainConfig {
            lr: scheme,
            ..TrainConfig::fixed(lr, 1)
        };
        let trainer = Trainer::new(
            borrow(f, "factorization")?.inner.clone(),
            borrow(p, "problem")?.inner.clone(),
            loss.to_kind(),
            config,
        )?;
        store(out, CpdynTrainer { inner: trainer })
    })
}

/// Takes `steps` gradient steps and writes the loss after them.
///
/// # Safety
/// `t` must be live; `loss_out` writable or null.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_run(t: *mut CpdynTrainer, steps: u64, loss_out: *mut f64) -> CpdynStatus {
    guard(|| {
        let t = &mut t.as_mut().ok_or_else(|| null("trainer"))?.inner;
        for _ in 0..steps {
            t.check_finite()?;
            t.step()?;
        }
        t.check_finite()?;
        let loss = t.evaluate()?;
        if !loss_out.is_null() {
            *loss_out = loss;
        }
        Ok(())
    })
}

/// Steps taken so far.
///
/// # Safety
/// `t` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_iterations(t: *const CpdynTrainer) -> u64 {
    t.as_ref().map_or(0, |t| t.inner.iter())
}

/// Sum of step sizes so far.
///
/// # Safety
/// `t` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_time(t: *const CpdynTrainer) -> f64 {
    t.as_ref().map_or(0.0, |t| t.inner.time())
}

/// New handle holding a copy of the current factorization.
///
/// # Safety
/// `t` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_factorization(
    t: *const CpdynTrainer,
    out: *mut *mut CpdynFactorization,
) -> CpdynStatus {
    guard(|| {
        let f = borrow(t, "trainer")?.inner.factorization().clone();
        store(out, CpdynFactorization { inner: f })
    })
}

/// # Safety
/// `t` must come from [`cpdyn_trainer_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cpdyn_trainer_free(t: *mut CpdynTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
