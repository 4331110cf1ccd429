//! C ABI over the simulation kernel.
//!
//! Every function returns a [`CisruStatus`]; on failure the message is
//! available from [`cisru_last_error`] on the same thread. Strings handed
//! out by the library are NUL-terminated UTF-8 and must be released with
//! [`cisru_string_free`]. Events, snapshots and command replies are JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cisru_sim::gateway::protocol::Command;
use cisru_sim::gateway::{GatewayError, Kernel, Scenario, SimConfig};
use serde_json::{json, Value};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CisruStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Scenario or command JSON that does not parse or validate.
    ParseError = 3,
    ConfigError = 4,
    /// The command parsed but the kernel refused it; the reply holds the
    /// typed error.
    CommandRejected = 5,
    KernelError = 6,
    Panic = 7,
}

/// Opaque kernel handle.
pub struct CisruKernel {
    kernel: Kernel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(status: CisruStatus, msg: impl Into<String>) -> CisruStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into `Panic` so it never unwinds into C.
fn guard(f: impl FnOnce() -> CisruStatus) -> CisruStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(CisruStatus::Panic, msg)
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, CisruStatus> {
    if p.is_null() {
        return Err(fail(CisruStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(CisruStatus::InvalidUtf8, e.to_string()))
}

unsafe fn hand_out(out: *mut *mut c_char, s: String) -> CisruStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            CisruStatus::Ok
        }
        Err(_) => fail(CisruStatus::KernelError, "output contains a NUL byte"),
    }
}

fn status_of(e: &GatewayError) -> CisruStatus {
    match e {
        GatewayError::Parse(_) => CisruStatus::ParseError,
        GatewayError::Config(_) => CisruStatus::ConfigError,
        _ => CisruStatus::KernelError,
    }
}

/// Builds a kernel from a scenario document.
///
/// `config_json` may be null; otherwise it is layered over the scenario's
/// own `config`. `seed` may be null to use the scenario's seed. The handle
/// is written to `*out` and must be released with [`cisru_kernel_free`].
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `seed`
/// null or readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_new(
    scenario_json: *const c_char,
    config_json: *const c_char,
    seed: *const u64,
    out: *mut *mut CisruKernel,
) -> CisruStatus {
    guard(|| {
        if out.is_null() {
            return fail(CisruStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(scenario_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let scenario = match Scenario::parse(text) {
            Ok(s) => s,
            Err(e) => return fail(CisruStatus::ParseError, e.to_string()),
        };
        let doc: Value = serde_json::from_str(text).expect("parsed above");
        let overlay = if config_json.is_null() {
            json!({})
        } else {
            let t = match read_str(config_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str(t) {
                Ok(v) => v,
                Err(e) => return fail(CisruStatus::ConfigError, format!("config: {e}")),
            }
        };
        let config = match SimConfig::layered(&[&scenario.config, &overlay]) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        let seed = if seed.is_null() { scenario.seed } else { *seed };
        match Kernel::new(doc, config, seed, json!({ "origin": "ffi" })) {
            Ok(kernel) => {
                *out = Box::into_raw(Box::new(CisruKernel { kernel }));
                CisruStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a kernel. Null is ignored.
///
/// # Safety
/// `k` must be null or a handle from [`cisru_kernel_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_free(k: *mut CisruKernel) {
    if !k.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(k))));
    }
}

/// Advances the simulation by `ticks` steps.
///
/// # Safety
/// `k` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_step(k: *mut CisruKernel, ticks: u64) -> CisruStatus {
    guard(|| {
        let Some(k) = k.as_mut() else {
            return fail(CisruStatus::NullPointer, "kernel is null");
        };
        for _ in 0..ticks {
            if let Err(e) = k.kernel.step() {
                return fail(status_of(&e), e.to_string());
            }
        }
        CisruStatus::Ok
    })
}

/// Current tick, or 0 for a null handle.
///
/// # Safety
/// `k` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_tick(k: *const CisruKernel) -> u64 {
    k.as_ref().map_or(0, |k| k.kernel.tick())
}

/// Ends the run: final map fusion and the `RunEnd` record. Idempotent.
///
/// # Safety
/// `k` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_finish(k: *mut CisruKernel) -> CisruStatus {
    guard(|| match k.as_mut() {
        Some(k) => {
            k.kernel.finish();
            CisruStatus::Ok
        }
        None => fail(CisruStatus::NullPointer, "kernel is null"),
    })
}

/// Moves the records produced since the last call into `*out` as JSON
/// Lines, identical to the event log a headless run writes.
///
/// # Safety
/// `k` must be null or a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_take_events(
    k: *mut CisruKernel,
    out: *mut *mut c_char,
) -> CisruStatus {
    guard(|| {
        let (Some(k), false) = (k.as_mut(), out.is_null()) else {
            return fail(CisruStatus::NullPointer, "kernel or out is null");
        };
        let mut s = String::new();
        for r in k.kernel.take_events() {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        hand_out(out, s)
    })
}

/// Writes the current console snapshot as JSON into `*out`.
///
/// # Safety
/// `k` must be null or a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_snapshot(
    k: *const CisruKernel,
    out: *mut *mut c_char,
) -> CisruStatus {
    guard(|| {
        let (Some(k), false) = (k.as_ref(), out.is_null()) else {
            return fail(CisruStatus::NullPointer, "kernel or out is null");
        };
        let snap = serde_json::to_string(&k.kernel.snapshot()).expect("snapshots serialize");
        hand_out(out, snap)
    })
}

/// Applies an operator command (the `Command` JSON of the console
/// protocol). `*reply` receives the ack on `Ok`, or the typed error on
/// `CommandRejected`; `reply` may be null when the caller does not need it.
///
/// # Safety
/// `k` must be null or a live handle; `command_json` a valid string;
/// `reply` null or writable.
#[no_mangle]
pub unsafe extern "C" fn cisru_kernel_apply_command(
    k: *mut CisruKernel,
    command_json: *const c_char,
    reply: *mut *mut c_char,
) -> CisruStatus {
    guard(|| {
        let Some(k) = k.as_mut() else {
            return fail(CisruStatus::NullPointer, "kernel is null");
        };
        let text = match read_str(command_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let command: Command = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(CisruStatus::ParseError, format!("command: {e}")),
        };
        let (status, body) = match k.kernel.apply_command(&command, "console") {
            Ok(ack) => (CisruStatus::Ok, serde_json::to_string(&ack)),
            Err(e) => {
                set_error(e.to_string());
                (CisruStatus::CommandRejected, serde_json::to_string(&e))
            }
        };
        if !reply.is_null() {
            let s = hand_out(reply, body.expect("replies serialize"));
            if s != CisruStatus::Ok {
                return s;
            }
        }
        status
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cisru_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cisru_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn cisru_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
