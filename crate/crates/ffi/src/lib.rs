//! C ABI over the nsdp toolkit.
//!
//! Models and solved value tables live behind opaque handles; structured data
//! crosses the boundary as JSON strings in the same formats the CLI reads and
//! writes. Every call returns an [`NsdpStatus`]; on any failure the
//! thread-local message behind [`nsdp_last_error`] describes it.
//!
//! Ownership rules: handles are freed with their `_free` function, strings
//! returned by this library with [`nsdp_string_free`]. Passing a null pointer
//! where a handle or string is expected yields `InvalidArgument`, never a
//! crash. Pointers must otherwise be valid for the stated types and lengths,
//! and handles must not be used after being freed.

// The safety contract above covers every entry point uniformly.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nsdp::dp::{self, AuditOptions, DpModel, SolveOptions, ValueTable};
use nsdp::grid::TableValue;
use nsdp::model::{digest_bytes, LoadedModel, LoadedProgram, ModelFile, ProgramFile};
use nsdp::report::{export_value_table, CheckStatus, Report};
use nsdp::stochastic::{reduce_to_deterministic, validate_adapted};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsdpStatus {
    Ok = 0,
    /// A null pointer, malformed UTF-8 or otherwise unusable argument.
    InvalidArgument = 1,
    /// The JSON text did not parse or did not build a model/program.
    ParseError = 2,
    /// The model parsed but failed validation or solving.
    ModelError = 3,
    /// The queried point carries the infeasibility sentinel.
    Infeasible = 4,
    /// At least one audit check failed (the report has details).
    CheckFailed = 5,
    /// A panic was caught at the boundary; state is unchanged.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

/// The model handle: the parsed model plus the digest of its source bytes.
pub struct NsdpModel {
    loaded: LoadedModel,
    digest: String,
}

/// A solved value table together with the (possibly reduced) model it was
/// solved on.
pub struct NsdpTable {
    model: DpModel,
    table: ValueTable,
}

fn guard<F: FnOnce() -> NsdpStatus>(body: F) -> NsdpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic caught at the ffi boundary");
            NsdpStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, NsdpStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(NsdpStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        NsdpStatus::InvalidArgument
    })
}

fn give_string(text: String, out: *mut *mut c_char) -> NsdpStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NsdpStatus::InvalidArgument;
    }
    match CString::new(text.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            NsdpStatus::Ok
        }
        Err(_) => {
            set_error("output text could not be encoded");
            NsdpStatus::InvalidArgument
        }
    }
}

/// Last error message for this thread, or null when none was recorded.
/// The caller owns the returned string.
#[no_mangle]
pub extern "C" fn nsdp_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(text) => text.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Free a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn nsdp_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// Parse a model from JSON text into a handle.
#[no_mangle]
pub unsafe extern "C" fn nsdp_model_parse(
    json: *const c_char,
    out_model: *mut *mut NsdpModel,
) -> NsdpStatus {
    guard(|| {
        if out_model.is_null() {
            set_error("null output pointer");
            return NsdpStatus::InvalidArgument;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let digest = digest_bytes(text.as_bytes());
        let file = match ModelFile::from_json(text) {
            Ok(f) => f,
            Err(err) => {
                set_error(err.to_string());
                return NsdpStatus::ParseError;
            }
        };
        match file.build() {
            Ok(loaded) => {
                *out_model = Box::into_raw(Box::new(NsdpModel { loaded, digest }));
                NsdpStatus::Ok
            }
            Err(err) => {
                set_error(err.to_string());
                NsdpStatus::ModelError
            }
        }
    })
}

/// Load a model from a file path.
#[no_mangle]
pub unsafe extern "C" fn nsdp_model_load(
    path: *const c_char,
    out_model: *mut *mut NsdpModel,
) -> NsdpStatus {
    guard(|| {
        if out_model.is_null() {
            set_error("null output pointer");
            return NsdpStatus::InvalidArgument;
        }
        let path = match read_str(path) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match nsdp::model::load_model(Path::new(path)) {
            Ok((loaded, digest)) => {
                *out_model = Box::into_raw(Box::new(NsdpModel { loaded, digest }));
                NsdpStatus::Ok
            }
            Err(err) => {
                set_error(err.to_string());
                NsdpStatus::ParseError
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn nsdp_model_free(model: *mut NsdpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// SHA-256 digest of the model source, as `sha256:<hex>`.
#[no_mangle]
pub unsafe extern "C" fn nsdp_model_digest(
    model: *const NsdpModel,
    out_digest: *mut *mut c_char,
) -> NsdpStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            set_error("null model handle");
            return NsdpStatus::InvalidArgument;
        };
        give_string(model.digest.clone(), out_digest)
    })
}

/// Solve the Bellman recursion. Negative `epsilon` keeps the model's own
/// truncation epsilon; stochastic models are reduced first.
#[no_mangle]
pub unsafe extern "C" fn nsdp_solve(
    model: *const NsdpModel,
    epsilon: f64,
    out_table: *mut *mut NsdpTable,
) -> NsdpStatus {
    guard(|| {
        let Some(handle) = model.as_ref() else {
            set_error("null model handle");
            return NsdpStatus::InvalidArgument;
        };
        if out_table.is_null() {
            set_error("null output pointer");
            return NsdpStatus::InvalidArgument;
        }
        let mut loaded = handle.loaded.clone();
        if epsilon >= 0.0 {
            match &mut loaded {
                LoadedModel::Deterministic(m) => {
                    if let dp::HorizonMode::Truncated { epsilon: e, .. } = &mut m.horizon {
                        *e = epsilon;
                    }
                }
                LoadedModel::Stochastic(m) => {
                    if let nsdp::stochastic::StochasticHorizon::Truncated { epsilon: e, .. } =
                        &mut m.horizon
                    {
                        *e = epsilon;
                    }
                }
            }
        }
        let reduced = match loaded {
            LoadedModel::Deterministic(m) => m,
            LoadedModel::Stochastic(sm) => match reduce_to_deterministic(&sm) {
                Ok(red) => red.model,
                Err(err) => {
                    set_error(err.to_string());
                    return NsdpStatus::ModelError;
                }
            },
        };
        match dp::solve_value(&reduced, &SolveOptions::default()) {
            Ok(table) => {
                *out_table = Box::into_raw(Box::new(NsdpTable { model: reduced, table }));
                NsdpStatus::Ok
            }
            Err(err) => {
                set_error(err.to_string());
                NsdpStatus::ModelError
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn nsdp_table_free(table: *mut NsdpTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Truncation horizon of a solved table.
#[no_mangle]
pub unsafe extern "C" fn nsdp_table_horizon(table: *const NsdpTable, out_t_eff: *mut usize) -> NsdpStatus {
    guard(|| {
        let Some(handle) = table.as_ref() else {
            set_error("null table handle");
            return NsdpStatus::InvalidArgument;
        };
        if out_t_eff.is_null() {
            set_error("null output pointer");
            return NsdpStatus::InvalidArgument;
        }
        *out_t_eff = handle.table.t_eff;
        NsdpStatus::Ok
    })
}

/// Interpolated value of stage `stage` at `point` (length `len`). Infeasible
/// regions report `Infeasible` and leave the output untouched.
#[no_mangle]
pub unsafe extern "C" fn nsdp_table_value(
    table: *const NsdpTable,
    stage: usize,
    point: *const f64,
    len: usize,
    out_value: *mut f64,
) -> NsdpStatus {
    guard(|| {
        let Some(handle) = table.as_ref() else {
            set_error("null table handle");
            return NsdpStatus::InvalidArgument;
        };
        if point.is_null() || out_value.is_null() {
            set_error("null pointer argument");
            return NsdpStatus::InvalidArgument;
        }
        let coords = std::slice::from_raw_parts(point, len);
        match handle.table.value_at(&handle.model, stage, coords) {
            Ok(TableValue::Finite(v)) => {
                *out_value = v;
                NsdpStatus::Ok
            }
            Ok(TableValue::Infeasible) => {
                set_error("queried point interpolates an infeasible region");
                NsdpStatus::Infeasible
            }
            Err(err) => {
                set_error(err.to_string());
                NsdpStatus::InvalidArgument
            }
        }
    })
}

/// Export the table in the same tab-separated format as the CLI.
#[no_mangle]
pub unsafe extern "C" fn nsdp_table_export(
    table: *const NsdpTable,
    out_text: *mut *mut c_char,
) -> NsdpStatus {
    guard(|| {
        let Some(handle) = table.as_ref() else {
            set_error("null table handle");
            return NsdpStatus::InvalidArgument;
        };
        match export_value_table(&handle.model, &handle.table, &SolveOptions::default(), 1e-9) {
            Ok(text) => give_string(text, out_text),
            Err(err) => {
                set_error(err.to_string());
                NsdpStatus::ModelError
            }
        }
    })
}

/// Audit a program (JSON, same format as the CLI) against the model. The
/// machine-readable report lands in `out_report_json`; `CheckFailed` means
/// the report contains at least one failed check.
#[no_mangle]
pub unsafe extern "C" fn nsdp_audit(
    model: *const NsdpModel,
    program_json: *const c_char,
    seed: u64,
    out_report_json: *mut *mut c_char,
) -> NsdpStatus {
    guard(|| {
        let Some(handle) = model.as_ref() else {
            set_error("null model handle");
            return NsdpStatus::InvalidArgument;
        };
        let text = match read_str(program_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let program = match ProgramFile::from_json(text).and_then(|p| p.build()) {
            Ok(p) => p,
            Err(err) => {
                set_error(err.to_string());
                return NsdpStatus::ParseError;
            }
        };
        let opts = AuditOptions { seed, ..AuditOptions::default() };
        match run_audit(handle, program, &opts) {
            Ok(report) => {
                let passed = report.passed();
                let status = give_string(report.to_json(), out_report_json);
                if status != NsdpStatus::Ok {
                    return status;
                }
                if passed {
                    NsdpStatus::Ok
                } else {
                    set_error("at least one audit check failed");
                    NsdpStatus::CheckFailed
                }
            }
            Err(err) => {
                set_error(err);
                NsdpStatus::ModelError
            }
        }
    })
}

fn run_audit(
    handle: &NsdpModel,
    program: LoadedProgram,
    opts: &AuditOptions,
) -> Result<Report, String> {
    let mut report = Report::new("audit", handle.digest.clone(), Some(opts.seed));
    let (model, states, stochastic) = match (&handle.loaded, program) {
        (LoadedModel::Deterministic(model), LoadedProgram::Deterministic(states)) => {
            (model.clone(), states, None)
        }
        (LoadedModel::Stochastic(smodel), LoadedProgram::Stochastic(process)) => {
            validate_adapted(&process, &smodel.tree).map_err(|e| e.to_string())?;
            let red = reduce_to_deterministic(smodel).map_err(|e| e.to_string())?;
            let flat = red.flatten_process(&process).map_err(|e| e.to_string())?;
            (red.model.clone(), flat, Some((smodel.clone(), red, process)))
        }
        _ => return Err("model and program kinds disagree".into()),
    };
    if states.len() < 2 {
        return Err("program needs at least two states".into());
    }
    let table = dp::solve_value(&model, &opts.solve).map_err(|e| e.to_string())?;
    let residuals =
        dp::bellman_residual(&model, &table, &states, &opts.solve).map_err(|e| e.to_string())?;
    let worst = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    report.push(
        "bellman",
        if worst <= opts.audit_tol { CheckStatus::Pass } else { CheckStatus::Fail },
        format!("worst |residual| = {worst:.3e}"),
        serde_json::json!({ "residuals": residuals }),
    );
    let transitions = states.len() - 1;
    for t in 0..transitions.saturating_sub(1) {
        let name = format!("euler[{t}]");
        match &stochastic {
            None => match dp::euler_check(
                &model,
                &table,
                t,
                &states[t],
                &states[t + 1],
                &states[t + 2],
                opts,
            ) {
                Ok(cert) => {
                    let ok = cert.membership.is_member();
                    report.push(
                        name,
                        if ok { CheckStatus::Pass } else { CheckStatus::Fail },
                        if ok { "member" } else { "non-member" }.to_string(),
                        serde_json::to_value(&cert).unwrap(),
                    );
                }
                Err(err) => report.push(
                    name,
                    CheckStatus::NotApplicable,
                    format!("premise uncertified: {err}"),
                    serde_json::json!(null),
                ),
            },
            Some((smodel, red, process)) => match nsdp::stochastic::stochastic_euler_check(
                smodel,
                red,
                &table,
                t,
                &process.stages[t],
                &process.stages[t + 1],
                &process.stages[t + 2],
                opts,
            ) {
                Ok(cert) => {
                    report.push(
                        name,
                        if cert.all_member { CheckStatus::Pass } else { CheckStatus::Fail },
                        if cert.all_member {
                            "member on every atom".to_string()
                        } else {
                            "non-member on at least one atom".to_string()
                        },
                        serde_json::to_value(&cert).unwrap(),
                    );
                }
                Err(err) => report.push(
                    name,
                    CheckStatus::NotApplicable,
                    format!("premise uncertified: {err}"),
                    serde_json::json!(null),
                ),
            },
        }
    }
    Ok(report)
}
