//! C ABI over `fastmtgp`.
//!
//! Every call returns an [`FmtStatus`]. On failure the message is kept per
//! thread and can be read with [`fmt_last_error_message`]. Panics are caught
//! at the boundary and reported as [`FmtStatus::Panic`].
//!
//! Typical use: create a model handle, read each task's design points, set
//! observations for every task, fit, then query posterior values or the
//! integral estimates. Tasks are indexed in the order their sizes were given.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use fastmtgp::cubature::multitask_cubature;
use fastmtgp::gp::{initial_hyperparams, GpModel, LossKind, RpropConfig};
use fastmtgp::kernels::KernelFamily;
use fastmtgp::ld::{default_generator, LdDesign};
use fastmtgp::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Observations missing for at least one task.
    NotReady = 3,
    /// Factorization failure or non-finite loss.
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmtKernel {
    SiLattice = 0,
    DsiDigital = 1,
    SeDense = 2,
}

impl From<FmtKernel> for KernelFamily {
    fn from(k: FmtKernel) -> Self {
        match k {
            FmtKernel::SiLattice => KernelFamily::SiLattice,
            FmtKernel::DsiDigital => KernelFamily::DsiDigital,
            FmtKernel::SeDense => KernelFamily::SeDense,
        }
    }
}

/// Opaque model handle.
pub struct FmtModel {
    family: KernelFamily,
    design: LdDesign,
    seed: u64,
    noise: f64,
    observations: Vec<Option<Vec<f64>>>,
    model: Option<GpModel>,
}

impl FmtModel {
    fn ready(&mut self) -> Result<&mut GpModel, (FmtStatus, String)> {
        if self.model.is_none() {
            let missing: Vec<usize> = (0..self.observations.len()).filter(|&k| self.observations[k].is_none()).collect();
            if !missing.is_empty() {
                return Err((FmtStatus::NotReady, format!("observations missing for tasks {missing:?}")));
            }
            let y: Vec<Vec<f64>> = self.observations.iter().map(|o| o.clone().unwrap_or_default()).collect();
            let h = initial_hyperparams(self.family, self.design.dim(), &y, self.noise, self.seed);
            let m = GpModel::new(self.family, self.design.clone(), y, h, LossKind::Nmll).map_err(classify)?;
            self.model = Some(m);
        }
        Ok(self.model.as_mut().expect("model built above"))
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(e: Error) -> (FmtStatus, String) {
    let status = match e {
        Error::SchurBreakdown { .. }
        | Error::CholeskyFailed(_)
        | Error::SingularSystem(_)
        | Error::ImaginaryResidue(_)
        | Error::NonFiniteLoss { .. } => FmtStatus::Numerical,
        _ => FmtStatus::InvalidArgument,
    };
    (status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), (FmtStatus, String)>) -> FmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FmtStatus::Panic
        }
    }
}

fn null() -> (FmtStatus, String) {
    (FmtStatus::NullPointer, "null pointer argument".into())
}

unsafe fn handle<'a>(h: *mut FmtModel) -> Result<&'a mut FmtModel, (FmtStatus, String)> {
    h.as_mut().ok_or_else(null)
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> Result<&'a [T], (FmtStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], (FmtStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn task_index(m: &FmtModel, task: usize) -> Result<usize, (FmtStatus, String)> {
    m.design
        .internal_index(task)
        .ok_or_else(|| (FmtStatus::InvalidArgument, format!("task {task} out of range")))
}

/// Creates a model on a randomly shifted low-discrepancy design.
///
/// # Safety
/// `sizes` must point to `num_tasks` readable values and `out` must be a
/// valid location for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_create(
    kernel: FmtKernel,
    dim: usize,
    sizes: *const usize,
    num_tasks: usize,
    seed: u64,
    noise: f64,
    out: *mut *mut FmtModel,
) -> FmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let sizes = slice(sizes, num_tasks)?.to_vec();
        if sizes.is_empty() {
            return Err((FmtStatus::InvalidArgument, "at least one task required".into()));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err((FmtStatus::InvalidArgument, format!("noise must be finite and non-negative, got {noise}")));
        }
        let family = KernelFamily::from(kernel);
        let kind = family.sequence_kind().unwrap_or(fastmtgp::ld::SequenceKind::Digital);
        let gen = Arc::new(default_generator(kind, dim).map_err(classify)?);
        let design = LdDesign::random(gen, &sizes, seed).map_err(classify)?;
        let m = FmtModel { family, design, seed, noise, observations: vec![None; sizes.len()], model: None };
        *out = Box::into_raw(Box::new(m));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`fmt_model_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_free(model: *mut FmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of samples of `task`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_task_size(model: *mut FmtModel, task: usize, out: *mut usize) -> FmtStatus {
    guard(|| {
        let m = handle(model)?;
        let k = task_index(m, task)?;
        *out.as_mut().ok_or_else(null)? = m.design.tasks()[k].n();
        Ok(())
    })
}

/// Copies the row-major `n × dim` points of `task` into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_points(model: *mut FmtModel, task: usize, buf: *mut f64, len: usize) -> FmtStatus {
    guard(|| {
        let m = handle(model)?;
        let k = task_index(m, task)?;
        let pts = &m.design.tasks()[k].points;
        if len < pts.len() {
            return Err((FmtStatus::BufferTooSmall, format!("need {} doubles, got {len}", pts.len())));
        }
        slice_mut(buf, len)?[..pts.len()].copy_from_slice(pts);
        Ok(())
    })
}

/// Sets the observations of `task`, one per design point.
///
/// # Safety
/// `y` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_set_observations(model: *mut FmtModel, task: usize, y: *const f64, len: usize) -> FmtStatus {
    guard(|| {
        let m = handle(model)?;
        let k = task_index(m, task)?;
        let n = m.design.tasks()[k].n();
        if len != n {
            return Err((FmtStatus::InvalidArgument, format!("task {task} has {n} points, got {len} values")));
        }
        let y = slice(y, len)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err((FmtStatus::InvalidArgument, "observations must be finite".into()));
        }
        m.observations[task] = Some(y.to_vec());
        m.model = None;
        Ok(())
    })
}

/// Runs `steps` optimizer iterations; writes the final loss when `loss` is
/// not null.
///
/// # Safety
/// `model` must be a live handle; `loss` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_fit(model: *mut FmtModel, steps: usize, loss: *mut f64) -> FmtStatus {
    guard(|| {
        let m = handle(model)?.ready()?;
        let report = m.fit(steps, &RpropConfig::default()).map_err(classify)?;
        if let Some(l) = loss.as_mut() {
            *l = report.final_loss;
        }
        Ok(())
    })
}

/// Posterior mean and variance of `task` at `count` row-major points.
/// `var` may be null.
///
/// # Safety
/// `x` must hold `count × dim` doubles; `mean` and `var` (if not null)
/// `count` doubles each.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_posterior(
    model: *mut FmtModel,
    task: usize,
    x: *const f64,
    count: usize,
    mean: *mut f64,
    var: *mut f64,
) -> FmtStatus {
    guard(|| {
        let fm = handle(model)?;
        let d = fm.design.dim();
        task_index(fm, task)?;
        let m = fm.ready()?;
        let x = slice(x, count * d)?;
        let out = slice_mut(mean, count)?;
        out.copy_from_slice(&m.posterior_mean_batch(task, x).map_err(classify)?);
        if !var.is_null() {
            let v = slice_mut(var, count)?;
            for (i, p) in x.chunks(d).enumerate() {
                v[i] = m.posterior_cov(task, p, task, p).map_err(classify)?;
            }
        }
        Ok(())
    })
}

/// Integral estimates `μ̂` (length L) and their covariance `Σ` (row-major
/// L × L, may be null).
///
/// # Safety
/// `mu` must hold `num_tasks` doubles and `sigma` (if not null) its square.
#[no_mangle]
pub unsafe extern "C" fn fmt_model_cubature(model: *mut FmtModel, mu: *mut f64, sigma: *mut f64) -> FmtStatus {
    guard(|| {
        let m = handle(model)?.ready()?;
        let l = m.num_tasks();
        let c = multitask_cubature(m, None).map_err(classify)?;
        slice_mut(mu, l)?.copy_from_slice(&c.mu_hat);
        if !sigma.is_null() {
            slice_mut(sigma, l * l)?.copy_from_slice(&c.sigma);
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL terminated and
/// truncated to `len` bytes. Returns the full message length excluding the
/// terminator, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fmt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}
