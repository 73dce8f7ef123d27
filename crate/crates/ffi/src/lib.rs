//! C ABI for the risk-limiting load-control toolchain.
//!
//! The surface mirrors the contract lifecycle: design bundles from a run
//! configuration, load a bundle into an opaque handle, query its terms
//! and certificate, evaluate the feedback policy at a state, and run a
//! closed-loop Monte-Carlo verification against the contracted
//! guarantees.
//!
//! Conventions, which the generated `include/rldc.h` documents per item:
//!
//! * Every fallible function returns [`rldc_status`]; `RLDC_OK` is `0`.
//! * After any non-OK status, [`rldc_last_error`] returns a NUL-terminated
//!   message. The buffer is thread-local and stays valid until the next
//!   `rldc_*` call on the same thread.
//! * `rldc_contract` is opaque; release it with [`rldc_contract_free`].
//!   Handles are immutable after load, so sharing one handle across
//!   threads for reads is safe; freeing must happen exactly once.
//! * No function stores pointers to caller memory beyond the call.
//! * Panics never unwind across the boundary; they surface as
//!   `RLDC_ERR_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rldc::cli::{run, Cli, Command, RunArgs};
use rldc::contract::{load_bundle, save_bundle, Contract};
use rldc::error::CoreError;
use rldc::hjb::ControlLaw;
use rldc::simulate::{simulate_closed_loop, NoiseSource, SimOptions};
use rldc::verify::{verify_conditions, Tolerances, VerificationReport};

/// Status code of every fallible call. Values 1-3 coincide with the
/// `rldc` command-line tool's exit codes for the same failure classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum rldc_status {
    /// Success.
    RLDC_OK = 0,
    /// Invalid parameters, malformed configuration, or inconsistent inputs.
    RLDC_ERR_VALIDATION = 1,
    /// A solver or estimator failed numerically.
    RLDC_ERR_NUMERICAL = 2,
    /// A verification run completed but a guarantee check failed.
    RLDC_ERR_VERIFICATION = 3,
    /// The operating system refused a file operation.
    RLDC_ERR_IO = 4,
    /// A data file could not be parsed.
    RLDC_ERR_PARSE = 5,
    /// A required pointer argument was NULL.
    RLDC_ERR_NULL_ARGUMENT = 6,
    /// A string argument was not valid UTF-8.
    RLDC_ERR_INVALID_UTF8 = 7,
    /// An internal invariant failed; the library state is still sound.
    RLDC_ERR_PANIC = 8,
}

/// One feedback decision: load modulation and the two compensation
/// loadings, each on the (price, demand) noise pair.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct rldc_decision {
    pub u: f64,
    pub gamma: [f64; 2],
    pub zeta: [f64; 2],
}

/// Contracted terms and certificate of a loaded bundle.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct rldc_contract_info {
    /// Promised expected payoff, $.
    pub b: f64,
    /// Payoff variance cap, $^2.
    pub s_cap: f64,
    /// Principal's risk-aversion coefficient the bundle was designed at.
    pub theta: f64,
    /// Suboptimality ratio in (0, 1]; NaN when no certificate exists.
    pub rho: f64,
    /// 1 when a certificate is present, else 0.
    pub has_certificate: i32,
    /// 1 when the certificate is exact for the instance, else 0.
    pub exact_instance: i32,
}

/// Result of one closed-loop Monte-Carlo verification.
///
/// The three `_pass` flags carry the verdicts; the call itself returns
/// `RLDC_OK` whenever the simulation and the statistics succeeded,
/// independent of the verdicts.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct rldc_verify_summary {
    pub n_paths: u64,
    pub mean_agent_payoff: f64,
    pub var_agent_payoff: f64,
    pub mean_principal_payoff: f64,
    pub var_principal_payoff: f64,
    /// Principal's certainty equivalent at the design-time aversion.
    pub principal_certainty_equivalent: f64,
    /// `mean(agent payoff) - b` and the band it must stay inside.
    pub participation_gap: f64,
    pub participation_threshold: f64,
    /// Sample payoff variance and the cap plus slack it is held to.
    pub variance_estimate: f64,
    pub variance_threshold: f64,
    /// Fraction of paths whose raw terminal budget dipped below the
    /// floor, and the largest acceptable fraction.
    pub violation_fraction: f64,
    pub violation_threshold: f64,
    pub participation_pass: i32,
    pub risk_pass: i32,
    pub budget_pass: i32,
}

/// Opaque designed-contract handle.
pub struct rldc_contract {
    inner: Contract,
    agent_id: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty C string"));
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").expect("literal"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn clear_error() {
    LAST_ERROR.with(|slot| {
        let mut current = slot.borrow_mut();
        if !current.as_bytes().is_empty() {
            *current = CString::new("").expect("empty C string");
        }
    });
}

fn fail(status: rldc_status, msg: &str) -> rldc_status {
    set_error(msg);
    status
}

fn status_of(err: &CoreError) -> rldc_status {
    match err {
        CoreError::Validation(_) => rldc_status::RLDC_ERR_VALIDATION,
        CoreError::Parse { .. } => rldc_status::RLDC_ERR_PARSE,
        CoreError::Numerical(_) => rldc_status::RLDC_ERR_NUMERICAL,
        CoreError::Verification(_) => rldc_status::RLDC_ERR_VERIFICATION,
        CoreError::Io { .. } => rldc_status::RLDC_ERR_IO,
    }
}

fn fail_core(err: &CoreError) -> rldc_status {
    fail(status_of(err), &err.to_string())
}

/// Run `body` with panics converted to `RLDC_ERR_PANIC`.
fn guarded(body: impl FnOnce() -> rldc_status) -> rldc_status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".to_string());
            fail(rldc_status::RLDC_ERR_PANIC, &format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be NULL or point to a NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, rldc_status> {
    if ptr.is_null() {
        return Err(fail(rldc_status::RLDC_ERR_NULL_ARGUMENT, &format!("{what} is NULL")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            Err(fail(rldc_status::RLDC_ERR_INVALID_UTF8, &format!("{what} is not valid UTF-8")))
        }
    }
}

fn handle_ref<'a>(ptr: *const rldc_contract) -> Result<&'a rldc_contract, rldc_status> {
    if ptr.is_null() {
        return Err(fail(rldc_status::RLDC_ERR_NULL_ARGUMENT, "contract handle is NULL"));
    }
    Ok(unsafe { &*ptr })
}

fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, rldc_status> {
    if ptr.is_null() {
        return Err(fail(rldc_status::RLDC_ERR_NULL_ARGUMENT, &format!("{what} is NULL")));
    }
    Ok(unsafe { &mut *ptr })
}

fn default_run_args(config: PathBuf) -> RunArgs {
    RunArgs {
        config,
        jobs: 0,
        seed: None,
        grid: None,
        mesh: None,
        paths: None,
        max_export: None,
        unit: None,
        dry_run: false,
        check: false,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rldc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread; empty string when
/// nothing failed yet. Valid until the next `rldc_*` call on the thread.
#[no_mangle]
pub extern "C" fn rldc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Run the design stage of a JSON run configuration: fit or load the
/// market models, solve the dynamic programs, and write one contract
/// bundle per variant under the configured output directory, exactly as
/// `rldc design --config PATH` would (progress goes to stdout).
///
/// # Safety
/// `config_path` must be NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rldc_design_file(config_path: *const c_char) -> rldc_status {
    guarded(|| {
        let path = match path_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cli = Cli { command: Command::Design(default_run_args(path)) };
        match run(cli) {
            Ok(()) => {
                clear_error();
                rldc_status::RLDC_OK
            }
            Err(e) => fail_core(&e),
        }
    })
}

/// Load a contract bundle directory (`contract.json` + `valuegrid.bin`)
/// into a handle. On success `*out` owns the contract.
///
/// # Safety
/// `bundle_dir` must be NULL or a NUL-terminated string; `out` must be
/// NULL or point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn rldc_contract_load(
    bundle_dir: *const c_char,
    out: *mut *mut rldc_contract,
) -> rldc_status {
    guarded(|| {
        let slot = match out_ref(out, "out") {
            Ok(r) => r,
            Err(s) => return s,
        };
        let dir = match path_arg(bundle_dir, "bundle_dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_bundle(&dir) {
            Ok(inner) => {
                let agent_id = CString::new(inner.agent_id.replace('\0', " "))
                    .expect("NUL bytes were replaced");
                *slot = Box::into_raw(Box::new(rldc_contract { inner, agent_id }));
                clear_error();
                rldc_status::RLDC_OK
            }
            Err(e) => fail_core(&e),
        }
    })
}

/// Persist a loaded contract as a bundle directory, creating it if
/// needed.
///
/// # Safety
/// `contract` must be NULL or a live handle; `dir` must be NULL or a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rldc_contract_save(
    contract: *const rldc_contract,
    dir: *const c_char,
) -> rldc_status {
    guarded(|| {
        let handle = match handle_ref(contract) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let dir = match path_arg(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_bundle(&handle.inner, Path::new(&dir)) {
            Ok(()) => {
                clear_error();
                rldc_status::RLDC_OK
            }
            Err(e) => fail_core(&e),
        }
    })
}

/// Release a handle. NULL is a no-op. Each handle must be freed exactly
/// once.
///
/// # Safety
/// `contract` must be NULL or a pointer returned by
/// [`rldc_contract_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn rldc_contract_free(contract: *mut rldc_contract) {
    if !contract.is_null() {
        drop(Box::from_raw(contract));
    }
}

/// Agent identifier of a loaded contract; NULL when the handle is NULL.
/// The string lives as long as the handle.
///
/// # Safety
/// `contract` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rldc_contract_agent_id(contract: *const rldc_contract) -> *const c_char {
    match handle_ref(contract) {
        Ok(h) => h.agent_id.as_ptr(),
        Err(_) => std::ptr::null(),
    }
}

/// Terms and certificate of a loaded contract.
///
/// # Safety
/// `contract` must be NULL or a live handle; `out` must be NULL or point
/// to writable storage for one `rldc_contract_info`.
#[no_mangle]
pub unsafe extern "C" fn rldc_contract_info(
    contract: *const rldc_contract,
    out: *mut rldc_contract_info,
) -> rldc_status {
    guarded(|| {
        let handle = match handle_ref(contract) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let slot = match out_ref(out, "out") {
            Ok(r) => r,
            Err(s) => return s,
        };
        let c = &handle.inner;
        *slot = rldc_contract_info {
            b: c.terms.b,
            s_cap: c.terms.s_cap,
            theta: c.theta,
            rho: c.certificate.map_or(f64::NAN, |cert| cert.rho),
            has_certificate: c.certificate.is_some() as i32,
            exact_instance: c.certificate.is_some_and(|cert| cert.exact_instance) as i32,
        };
        clear_error();
        rldc_status::RLDC_OK
    })
}

/// Evaluate the raw feedback policy at a state: time `t` (hours), log
/// spot price `w`, indoor temperature `x`, remaining risk budget `y`.
/// Coordinates outside the solved box are clamped onto it. The returned
/// decision is the law itself; the closed-loop simulator additionally
/// projects the loadings onto what the remaining budget affords.
///
/// # Safety
/// `contract` must be NULL or a live handle; `out` must be NULL or point
/// to writable storage for one `rldc_decision`.
#[no_mangle]
pub unsafe extern "C" fn rldc_policy_eval(
    contract: *const rldc_contract,
    t: f64,
    w: f64,
    x: f64,
    y: f64,
    out: *mut rldc_decision,
) -> rldc_status {
    guarded(|| {
        let handle = match handle_ref(contract) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let slot = match out_ref(out, "out") {
            Ok(r) => r,
            Err(s) => return s,
        };
        for (name, v) in [("t", t), ("w", w), ("x", x), ("y", y)] {
            if !v.is_finite() {
                return fail(
                    rldc_status::RLDC_ERR_VALIDATION,
                    &format!("state coordinate {name} is not finite"),
                );
            }
        }
        let d = handle.inner.policy.control(t, w, x, y);
        *slot = rldc_decision { u: d.u, gamma: d.gamma, zeta: d.zeta };
        clear_error();
        rldc_status::RLDC_OK
    })
}

fn summarize(report: &VerificationReport) -> Result<rldc_verify_summary, rldc_status> {
    let mut s = rldc_verify_summary {
        n_paths: report.n_paths as u64,
        mean_agent_payoff: report.agent_payoff.mean,
        var_agent_payoff: report.agent_payoff.variance,
        mean_principal_payoff: report.principal_payoff.mean,
        var_principal_payoff: report.principal_payoff.variance,
        principal_certainty_equivalent: report
            .principal_certainty_equivalent
            .as_ref()
            .map_or(f64::NAN, |ce| ce.value),
        participation_gap: f64::NAN,
        participation_threshold: f64::NAN,
        variance_estimate: f64::NAN,
        variance_threshold: f64::NAN,
        violation_fraction: f64::NAN,
        violation_threshold: f64::NAN,
        participation_pass: 0,
        risk_pass: 0,
        budget_pass: 0,
    };
    for check in &report.checks {
        match check.name.as_str() {
            "participation_payoff_gap" => {
                s.participation_gap = check.estimate;
                s.participation_threshold = check.threshold;
                s.participation_pass = check.pass as i32;
            }
            "risk_limiting_variance" => {
                s.variance_estimate = check.estimate;
                s.variance_threshold = check.threshold;
                s.risk_pass = check.pass as i32;
            }
            "budget_floor_violations" => {
                s.violation_fraction = check.estimate;
                s.violation_threshold = check.threshold;
                s.budget_pass = check.pass as i32;
            }
            other => {
                return Err(fail(
                    rldc_status::RLDC_ERR_VALIDATION,
                    &format!("unexpected verification check '{other}'"),
                ));
            }
        }
    }
    Ok(s)
}

/// Simulate `n_paths` closed-loop paths under the contract's own policy
/// and models with the budget gate enforced, then check the contracted
/// guarantees at the default tolerances. All randomness derives from
/// `seed`; equal seeds give bit-identical results. The verdicts land in
/// `out`; the status reports only mechanical failure.
///
/// # Safety
/// `contract` must be NULL or a live handle; `out` must be NULL or point
/// to writable storage for one `rldc_verify_summary`.
#[no_mangle]
pub unsafe extern "C" fn rldc_simulate_verify(
    contract: *const rldc_contract,
    seed: u64,
    n_paths: u64,
    out: *mut rldc_verify_summary,
) -> rldc_status {
    guarded(|| {
        let handle = match handle_ref(contract) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let slot = match out_ref(out, "out") {
            Ok(r) => r,
            Err(s) => return s,
        };
        let c = &handle.inner;
        let Some(market) = c.policy.market.as_ref() else {
            return fail(
                rldc_status::RLDC_ERR_VALIDATION,
                "contract bundle carries no market model",
            );
        };
        let noise = NoiseSource::new(seed, 0);
        let bundle = match simulate_closed_loop(
            &c.policy.agent,
            market,
            &c.policy,
            n_paths as usize,
            &noise,
            &SimOptions::default(),
            0,
        ) {
            Ok(b) => b,
            Err(e) => return fail_core(&e),
        };
        let report =
            match verify_conditions(&bundle, &c.terms, &Tolerances::default(), Some(c.theta)) {
                Ok(r) => r,
                Err(e) => return fail_core(&e),
            };
        match summarize(&report) {
            Ok(s) => {
                *slot = s;
                clear_error();
                rldc_status::RLDC_OK
            }
            Err(status) => status,
        }
    })
}
