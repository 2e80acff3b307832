//! C ABI over the metasched schedulers.
//!
//! Exposes two opaque handle types: `MsdCheckpoint` (a loaded meta-net
//! checkpoint) and `MsdSchedule` (a stateful learning-rate source built
//! from a checkpoint or from a schedule-spec JSON). Every fallible call
//! returns an [`MsdStatus`]; out-parameters are written only on
//! `MSD_STATUS_OK`, and [`msd_last_error`] returns a thread-local message
//! describing the most recent failure on the calling thread.
//!
//! Handles are single-owner and must be released with their matching
//! `_free` function. A schedule handle carries mutable replay state
//! (recurrent state, restart counters), so calls on one handle must be
//! externally serialized; distinct handles are independent.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use metasched::error::Error;
use metasched::mlrsnet::{load_checkpoint, MLRSNetParams};
use metasched::schedules::{
    frozen_meta_lr, lr_at, FrozenMetaRuntime, ScheduleContext, ScheduleSpec, SchedulerRuntime,
};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Input violated a mathematical precondition.
    Domain = 3,
    /// Tensor shapes did not line up.
    Shape = 4,
    /// API misuse (wrong observations fed to a scheduler, stale cache).
    Usage = 5,
    /// Training produced a non-finite value.
    Divergence = 6,
    /// Configuration or spec is inconsistent.
    Config = 7,
    /// Checkpoint file carries an unsupported format version.
    Incompatible = 8,
    /// File contents could not be parsed.
    Parse = 9,
    /// Malformed CSV data.
    Csv = 10,
    /// Filesystem error.
    Io = 11,
    /// Unexpected internal failure.
    Internal = 12,
}

/// A loaded meta-net checkpoint: parameters plus run provenance.
pub struct MsdCheckpoint {
    params: MLRSNetParams,
    step: u64,
    seed: u64,
}

enum ScheduleImpl {
    /// Classical schedule (or a spec-built frozen net) driven by `lr_at`.
    Spec {
        spec: ScheduleSpec,
        runtime: SchedulerRuntime,
    },
    /// Frozen meta-net built straight from a checkpoint handle.
    Frozen(FrozenMetaRuntime),
}

/// A stateful learning-rate source. Not thread-safe; serialize calls.
pub struct MsdSchedule {
    inner: ScheduleImpl,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn status_of(e: &Error) -> MsdStatus {
    match e {
        Error::Domain(_) => MsdStatus::Domain,
        Error::ShapeMismatch(_) => MsdStatus::Shape,
        Error::Usage(_) => MsdStatus::Usage,
        Error::Divergence(_) => MsdStatus::Divergence,
        Error::Config(_) => MsdStatus::Config,
        Error::CheckpointVersion { .. } => MsdStatus::Incompatible,
        Error::Parse { .. } => MsdStatus::Parse,
        Error::Csv { .. } => MsdStatus::Csv,
        Error::Io { .. } => MsdStatus::Io,
    }
}

fn fail(e: &Error) -> MsdStatus {
    set_error(&e.to_string());
    status_of(e)
}

fn fail_null(what: &str) -> MsdStatus {
    set_error(&format!("null pointer passed for {what}"));
    MsdStatus::NullArgument
}

/// Runs `f`, converting a panic into `MsdStatus::Internal` instead of
/// unwinding across the C boundary.
fn guard(f: impl FnOnce() -> MsdStatus) -> MsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == MsdStatus::Ok {
                clear_error();
            }
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsdStatus::Internal
        }
    }
}

/// Reads a caller string; `what` names the argument in error messages.
///
/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, MsdStatus> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        MsdStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on the calling thread, empty
/// when the last call succeeded. The pointer stays valid until the next
/// call into this library from the same thread.
#[no_mangle]
pub extern "C" fn msd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a meta-net checkpoint from a JSON file written by the trainer.
/// On success writes a new handle to `out`; free it with
/// `msd_checkpoint_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_load(
    path: *const c_char,
    out: *mut *mut MsdCheckpoint,
) -> MsdStatus {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let ckpt = match load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        let params = match ckpt.to_params() {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let handle = Box::new(MsdCheckpoint {
            params,
            step: ckpt.step,
            seed: ckpt.seed,
        });
        out.write(Box::into_raw(handle));
        MsdStatus::Ok
    })
}

/// Releases a checkpoint handle. Null is a no-op.
///
/// # Safety
/// `ck` must be null or a pointer from `msd_checkpoint_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_free(ck: *mut MsdCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Hidden size of the checkpointed meta-net.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_hidden_size(
    ck: *const MsdCheckpoint,
    out: *mut usize,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        out.write(ck.params.hidden_size());
        MsdStatus::Ok
    })
}

/// Upper bound gamma of the checkpoint's learning-rate range (0, gamma).
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_gamma(
    ck: *const MsdCheckpoint,
    out: *mut f64,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        out.write(ck.params.gamma());
        MsdStatus::Ok
    })
}

/// Number of meta-net parameters in the checkpoint.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_num_params(
    ck: *const MsdCheckpoint,
    out: *mut usize,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        out.write(ck.params.num_params());
        MsdStatus::Ok
    })
}

/// Training step at which the checkpoint was written.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_step(
    ck: *const MsdCheckpoint,
    out: *mut u64,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        out.write(ck.step);
        MsdStatus::Ok
    })
}

/// Seed of the run that produced the checkpoint.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_checkpoint_seed(
    ck: *const MsdCheckpoint,
    out: *mut u64,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        out.write(ck.seed);
        MsdStatus::Ok
    })
}

/// Builds a frozen meta-net schedule from a loaded checkpoint. The handle
/// starts with zeroed recurrent state and advances it on every
/// `msd_schedule_lr` call. The checkpoint handle stays owned by the caller
/// and may be freed immediately after this call. Free the schedule with
/// `msd_schedule_free`.
///
/// # Safety
/// `ck` must be a live checkpoint handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_schedule_from_checkpoint(
    ck: *const MsdCheckpoint,
    out: *mut *mut MsdSchedule,
) -> MsdStatus {
    guard(|| {
        let (Some(ck), false) = (ck.as_ref(), out.is_null()) else {
            return fail_null("ck/out");
        };
        let ctx = ScheduleContext::default();
        let runtime =
            match FrozenMetaRuntime::from_params(vec![ck.params.clone()], vec![0], &ctx) {
                Ok(rt) => rt,
                Err(e) => return fail(&e),
            };
        let handle = Box::new(MsdSchedule {
            inner: ScheduleImpl::Frozen(runtime),
        });
        out.write(Box::into_raw(handle));
        MsdStatus::Ok
    })
}

/// Builds a schedule from a spec JSON object, e.g.
/// `{"kind":"exponential","lr0":0.1,"rate":0.95}` or
/// `{"kind":"frozen-meta-net","checkpoints":["net.json"]}`. Supported kinds:
/// fixed, exponential, multi-step, sgdr, hd, frozen-meta-net.
/// `steps_per_epoch` feeds restart bookkeeping for sgdr; pass the training
/// loop's value, or 1 when irrelevant.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_schedule_from_json(
    json: *const c_char,
    steps_per_epoch: u64,
    out: *mut *mut MsdSchedule,
) -> MsdStatus {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let json = match read_str(json, "json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let spec: ScheduleSpec = match serde_json::from_str(json) {
            Ok(s) => s,
            Err(e) => {
                set_error(&format!("schedule spec: {e}"));
                return MsdStatus::Parse;
            }
        };
        let ctx = ScheduleContext {
            steps_per_epoch,
            ..ScheduleContext::default()
        };
        let runtime = match SchedulerRuntime::for_spec(&spec, &ctx) {
            Ok(rt) => rt,
            Err(e) => return fail(&e),
        };
        let handle = Box::new(MsdSchedule {
            inner: ScheduleImpl::Spec { spec, runtime },
        });
        out.write(Box::into_raw(handle));
        MsdStatus::Ok
    })
}

/// Releases a schedule handle. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer from a schedule constructor not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msd_schedule_free(s: *mut MsdSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

fn schedule_lr(
    s: &mut MsdSchedule,
    step: u64,
    epoch: u64,
    observed_loss: f64,
    observed_grad: Option<&[f64]>,
    out: &mut f64,
) -> MsdStatus {
    let lr = match &mut s.inner {
        ScheduleImpl::Frozen(rt) => frozen_meta_lr(rt, observed_loss),
        ScheduleImpl::Spec { spec, runtime } => {
            lr_at(spec, runtime, step, epoch, Some(observed_loss), observed_grad)
        }
    };
    match lr {
        Ok(lr) => {
            *out = lr;
            MsdStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Learning rate for training step `step` in `epoch`, advancing the
/// handle's state. `observed_loss` is the current training loss; it drives
/// frozen meta-net schedules and is ignored by the classical ones.
/// Hypergradient-descent schedules need the gradient variant instead.
///
/// # Safety
/// `s` must be a live schedule handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_schedule_lr(
    s: *mut MsdSchedule,
    step: u64,
    epoch: u64,
    observed_loss: f64,
    out: *mut f64,
) -> MsdStatus {
    guard(|| {
        let (Some(s), false) = (s.as_mut(), out.is_null()) else {
            return fail_null("s/out");
        };
        let mut lr = 0.0;
        let status = schedule_lr(s, step, epoch, observed_loss, None, &mut lr);
        if status == MsdStatus::Ok {
            out.write(lr);
        }
        status
    })
}

/// Like `msd_schedule_lr`, additionally passing the current flat gradient
/// (`grad`, length `grad_len`) for schedules that consume it
/// (hypergradient descent).
///
/// # Safety
/// `s` must be a live schedule handle; `grad` must point to `grad_len`
/// readable doubles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msd_schedule_lr_with_grad(
    s: *mut MsdSchedule,
    step: u64,
    epoch: u64,
    observed_loss: f64,
    grad: *const f64,
    grad_len: usize,
    out: *mut f64,
) -> MsdStatus {
    guard(|| {
        let (Some(s), false) = (s.as_mut(), out.is_null()) else {
            return fail_null("s/out");
        };
        if grad.is_null() && grad_len > 0 {
            return fail_null("grad");
        }
        let grad_slice = if grad_len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(grad, grad_len)
        };
        let mut lr = 0.0;
        let status = schedule_lr(s, step, epoch, observed_loss, Some(grad_slice), &mut lr);
        if status == MsdStatus::Ok {
            out.write(lr);
        }
        status
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use metasched::mlrsnet::{save_checkpoint, CheckpointMeta};
    use metasched::numcore::RngStream;
    use std::ffi::CString;
    use std::path::PathBuf;

    fn write_checkpoint(dir: &Path, hidden: usize, gamma: f64, seed: u64) -> PathBuf {
        let mut rng = RngStream::new(seed);
        let params = MLRSNetParams::init(hidden, gamma, &mut rng).unwrap();
        let meta = CheckpointMeta {
            step: 7,
            seed,
            config_hash: "cafe".into(),
        };
        let path = dir.join(format!("net-{seed}.json"));
        save_checkpoint(&params, &meta, &path).unwrap();
        path
    }

    fn load_handle(path: &Path) -> *mut MsdCheckpoint {
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        let mut out: *mut MsdCheckpoint = std::ptr::null_mut();
        let status = unsafe { msd_checkpoint_load(c_path.as_ptr(), &mut out) };
        assert_eq!(status, MsdStatus::Ok);
        assert!(!out.is_null());
        out
    }

    fn last_error_string() -> String {
        unsafe { CStr::from_ptr(msd_last_error()) }
            .to_str()
            .unwrap()
            .to_string()
    }

    #[test]
    fn checkpoint_load_and_getters() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_checkpoint(dir.path(), 6, 0.8, 42);
        let ck = load_handle(&path);

        let mut hidden = 0usize;
        let mut gamma = 0.0f64;
        let mut n = 0usize;
        let mut step = 0u64;
        let mut seed = 0u64;
        unsafe {
            assert_eq!(msd_checkpoint_hidden_size(ck, &mut hidden), MsdStatus::Ok);
            assert_eq!(msd_checkpoint_gamma(ck, &mut gamma), MsdStatus::Ok);
            assert_eq!(msd_checkpoint_num_params(ck, &mut n), MsdStatus::Ok);
            assert_eq!(msd_checkpoint_step(ck, &mut step), MsdStatus::Ok);
            assert_eq!(msd_checkpoint_seed(ck, &mut seed), MsdStatus::Ok);
            msd_checkpoint_free(ck);
        }
        assert_eq!(hidden, 6);
        assert_eq!(gamma, 0.8);
        assert_eq!(n, 9 * 36 + 12 * 6 + 1);
        assert_eq!(step, 7);
        assert_eq!(seed, 42);
    }

    #[test]
    fn missing_file_reports_io_with_message() {
        let c_path = CString::new("/nonexistent/net.json").unwrap();
        let mut out: *mut MsdCheckpoint = std::ptr::null_mut();
        let status = unsafe { msd_checkpoint_load(c_path.as_ptr(), &mut out) };
        assert_eq!(status, MsdStatus::Io);
        assert!(out.is_null());
        assert!(last_error_string().contains("/nonexistent/net.json"));
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out: *mut MsdCheckpoint = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                msd_checkpoint_load(std::ptr::null(), &mut out),
                MsdStatus::NullArgument
            );
            let mut lr = 0.0;
            assert_eq!(
                msd_schedule_lr(std::ptr::null_mut(), 0, 0, 1.0, &mut lr),
                MsdStatus::NullArgument
            );
            // Frees tolerate null.
            msd_checkpoint_free(std::ptr::null_mut());
            msd_schedule_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn invalid_utf8_path_is_rejected() {
        let bytes = b"net-\xff.json\0";
        let mut out: *mut MsdCheckpoint = std::ptr::null_mut();
        let status =
            unsafe { msd_checkpoint_load(bytes.as_ptr() as *const c_char, &mut out) };
        assert_eq!(status, MsdStatus::InvalidUtf8);
    }

    #[test]
    fn frozen_schedule_matches_core_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_checkpoint(dir.path(), 5, 1.0, 9);
        let ck = load_handle(&path);

        let mut sched: *mut MsdSchedule = std::ptr::null_mut();
        unsafe {
            assert_eq!(msd_schedule_from_checkpoint(ck, &mut sched), MsdStatus::Ok);
        }

        // Core-side replay of the same checkpoint.
        let mut rng = RngStream::new(9);
        let params = MLRSNetParams::init(5, 1.0, &mut rng).unwrap();
        let ctx = ScheduleContext::default();
        let mut rt = FrozenMetaRuntime::from_params(vec![params], vec![0], &ctx).unwrap();

        for step in 0..10u64 {
            let loss = 2.0 / (1.0 + step as f64);
            let want = frozen_meta_lr(&mut rt, loss).unwrap();
            let mut got = 0.0;
            let status = unsafe { msd_schedule_lr(sched, step, 0, loss, &mut got) };
            assert_eq!(status, MsdStatus::Ok);
            assert_eq!(got, want);
            assert!(got > 0.0 && got < 1.0);
        }
        unsafe {
            msd_schedule_free(sched);
            msd_checkpoint_free(ck);
        }
    }

    #[test]
    fn json_schedules_produce_expected_rates() {
        let fixed = CString::new(r#"{"kind":"fixed","lr0":0.05}"#).unwrap();
        let expo = CString::new(r#"{"kind":"exponential","lr0":0.1,"rate":0.5}"#).unwrap();
        unsafe {
            let mut s: *mut MsdSchedule = std::ptr::null_mut();
            assert_eq!(
                msd_schedule_from_json(fixed.as_ptr(), 1, &mut s),
                MsdStatus::Ok
            );
            let mut lr = 0.0;
            assert_eq!(msd_schedule_lr(s, 3, 2, 1.0, &mut lr), MsdStatus::Ok);
            assert_eq!(lr, 0.05);
            msd_schedule_free(s);

            let mut s: *mut MsdSchedule = std::ptr::null_mut();
            assert_eq!(
                msd_schedule_from_json(expo.as_ptr(), 1, &mut s),
                MsdStatus::Ok
            );
            assert_eq!(msd_schedule_lr(s, 10, 2, 1.0, &mut lr), MsdStatus::Ok);
            assert_eq!(lr, 0.1 * 0.5 * 0.5);
            msd_schedule_free(s);
        }
    }

    #[test]
    fn hd_schedule_needs_the_gradient_variant() {
        let hd = CString::new(r#"{"kind":"hd","alpha0":0.1,"hyper_lr":0.01}"#).unwrap();
        unsafe {
            let mut s: *mut MsdSchedule = std::ptr::null_mut();
            assert_eq!(msd_schedule_from_json(hd.as_ptr(), 1, &mut s), MsdStatus::Ok);

            let mut lr = 0.0;
            assert_eq!(msd_schedule_lr(s, 0, 0, 1.0, &mut lr), MsdStatus::Usage);
            assert!(!last_error_string().is_empty());

            let g = [0.5f64, -0.25];
            assert_eq!(
                msd_schedule_lr_with_grad(s, 0, 0, 1.0, g.as_ptr(), g.len(), &mut lr),
                MsdStatus::Ok
            );
            assert_eq!(lr, 0.1);
            // Aligned consecutive gradients raise the rate.
            assert_eq!(
                msd_schedule_lr_with_grad(s, 1, 0, 0.9, g.as_ptr(), g.len(), &mut lr),
                MsdStatus::Ok
            );
            assert!(lr > 0.1);
            msd_schedule_free(s);
        }
    }

    #[test]
    fn malformed_json_reports_parse() {
        let bad = CString::new(r#"{"kind":"fixed""#).unwrap();
        let mut s: *mut MsdSchedule = std::ptr::null_mut();
        let status = unsafe { msd_schedule_from_json(bad.as_ptr(), 1, &mut s) };
        assert_eq!(status, MsdStatus::Parse);
        assert!(last_error_string().contains("schedule spec"));
    }

    #[test]
    fn invalid_spec_reports_config() {
        let bad = CString::new(r#"{"kind":"exponential","lr0":-0.1,"rate":0.5}"#).unwrap();
        let mut s: *mut MsdSchedule = std::ptr::null_mut();
        let status = unsafe { msd_schedule_from_json(bad.as_ptr(), 1, &mut s) };
        assert_eq!(status, MsdStatus::Config);
    }

    #[test]
    fn success_clears_the_error_message() {
        let missing = CString::new("/nonexistent/x.json").unwrap();
        let mut out: *mut MsdCheckpoint = std::ptr::null_mut();
        unsafe {
            let _ = msd_checkpoint_load(missing.as_ptr(), &mut out);
        }
        assert!(!last_error_string().is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = write_checkpoint(dir.path(), 4, 1.0, 3);
        let ck = load_handle(&path);
        assert!(last_error_string().is_empty());
        unsafe { msd_checkpoint_free(ck) };
    }

    #[test]
    fn version_is_a_valid_cstring() {
        let v = unsafe { CStr::from_ptr(msd_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }
}
