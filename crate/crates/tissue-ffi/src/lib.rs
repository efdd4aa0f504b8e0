//! C ABI over the tissue simulation.
//!
//! The surface is a handle-based wrapper around the twocell setup: build
//! a simulation, feed it antigen and signal values, step it in virtual
//! time, and read back the responses. Every function returns a
//! [`TissueStatus`]; details for the most recent failure on the calling
//! thread come from [`tissue_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tissue::engine::{Engine, IngestHandle};
use tissue::twocell::{build_engine, TwocellConfig};

/// Result of every call. Anything but `Ok` leaves a message for
/// [`tissue_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TissueStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArg = 1,
    /// An argument failed validation (bad antigen value, signal index,
    /// out-of-range index).
    InvalidArg = 2,
    /// A parameter file could not be read or parsed.
    ParseError = 3,
    /// The simulation itself failed.
    RuntimeError = 4,
}

/// An opaque simulation handle. Not thread-safe; confine each handle to
/// one thread or lock around it.
pub struct TissueSim {
    engine: Engine,
    ingest: IngestHandle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: TissueStatus, message: impl AsRef<str>) -> TissueStatus {
    let message = message.as_ref().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message).unwrap_or_default();
    });
    status
}

fn guard(body: impl FnOnce() -> TissueStatus) -> TissueStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(TissueStatus::RuntimeError, "internal panic"),
    }
}

fn new_sim(config: TwocellConfig, out: *mut *mut TissueSim) -> TissueStatus {
    match build_engine(&config) {
        Ok(mut engine) => {
            engine.set_response_logging(true);
            let ingest = engine.ingest_handle();
            let sim = Box::new(TissueSim { engine, ingest });
            unsafe { *out = Box::into_raw(sim) };
            TissueStatus::Ok
        }
        Err(e) => fail(TissueStatus::InvalidArg, e.to_string()),
    }
}

/// Builds a simulation with the built-in parameters.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_new_default(
    seed: u64,
    signal_enabled: bool,
    out: *mut *mut TissueSim,
) -> TissueStatus {
    guard(|| {
        if out.is_null() {
            return fail(TissueStatus::NullArg, "out is null");
        }
        let mut config = TwocellConfig::default();
        config.signal_enabled = signal_enabled;
        config.tissue.rng_seed = seed;
        new_sim(config, out)
    })
}

/// Builds a simulation from a parameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_new_from_file(
    path: *const c_char,
    seed: u64,
    out: *mut *mut TissueSim,
) -> TissueStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(TissueStatus::NullArg, "path or out is null");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(TissueStatus::InvalidArg, "path is not UTF-8"),
        };
        let mut config = match TwocellConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => return fail(TissueStatus::ParseError, e.to_string()),
        };
        config.tissue.rng_seed = seed;
        new_sim(config, out)
    })
}

/// Frees a simulation. Passing null is a no-op.
///
/// # Safety
/// `sim` must have come from a `tissue_sim_new_*` call and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_free(sim: *mut TissueSim) {
    if !sim.is_null() {
        drop(unsafe { Box::from_raw(sim) });
    }
}

/// Queues one antigen value; it enters the tissue on the next tick.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_ingest_antigen(
    sim: *mut TissueSim,
    value: u32,
) -> TissueStatus {
    guard(|| {
        let Some(sim) = (unsafe { sim.as_mut() }) else {
            return fail(TissueStatus::NullArg, "sim is null");
        };
        let alphabet = sim.engine.params().antigen_alphabet;
        match tissue::model::Antigen::new(value, alphabet) {
            Ok(antigen) => {
                sim.ingest.push_antigen(antigen);
                TissueStatus::Ok
            }
            Err(e) => fail(TissueStatus::InvalidArg, e.to_string()),
        }
    })
}

/// Queues one signal assignment; it applies on the next tick.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_set_signal(
    sim: *mut TissueSim,
    index: usize,
    level: f64,
) -> TissueStatus {
    guard(|| {
        let Some(sim) = (unsafe { sim.as_mut() }) else {
            return fail(TissueStatus::NullArg, "sim is null");
        };
        let slots = sim.engine.params().signal_slots();
        if index >= slots {
            return fail(
                TissueStatus::InvalidArg,
                format!("signal index {index} is outside 0..{slots}"),
            );
        }
        if !level.is_finite() {
            return fail(TissueStatus::InvalidArg, "signal level must be finite");
        }
        sim.ingest.push_signal(index, level);
        TissueStatus::Ok
    })
}

/// Advances the simulation one tick.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_tick(sim: *mut TissueSim) -> TissueStatus {
    unsafe { tissue_sim_step(sim, 1) }
}

/// Advances the simulation `ticks` ticks in virtual time.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_step(sim: *mut TissueSim, ticks: u64) -> TissueStatus {
    guard(|| {
        let Some(sim) = (unsafe { sim.as_mut() }) else {
            return fail(TissueStatus::NullArg, "sim is null");
        };
        match sim.engine.run_virtual(ticks, None) {
            Ok(()) => TissueStatus::Ok,
            Err(e) => fail(TissueStatus::RuntimeError, e.to_string()),
        }
    })
}

/// Ticks run so far.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`; null reads 0.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_tick_count(sim: *const TissueSim) -> u64 {
    unsafe { sim.as_ref() }.map_or(0, |sim| sim.engine.tick_count())
}

/// Responses recorded so far.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`; null reads 0.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_response_count(sim: *const TissueSim) -> usize {
    unsafe { sim.as_ref() }.map_or(0, |sim| sim.engine.responses().len())
}

/// Copies response `index` into the non-null out parameters.
///
/// # Safety
/// `sim` must be a live handle from `tissue_sim_new_*`; each non-null
/// out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn tissue_sim_response_at(
    sim: *const TissueSim,
    index: usize,
    tick_out: *mut u64,
    cell_out: *mut usize,
    value_out: *mut u32,
) -> TissueStatus {
    guard(|| {
        let Some(sim) = (unsafe { sim.as_ref() }) else {
            return fail(TissueStatus::NullArg, "sim is null");
        };
        let responses = sim.engine.responses();
        let Some(response) = responses.get(index) else {
            return fail(
                TissueStatus::InvalidArg,
                format!("response index {index} is outside 0..{}", responses.len()),
            );
        };
        unsafe {
            if !tick_out.is_null() {
                *tick_out = response.tick;
            }
            if !cell_out.is_null() {
                *cell_out = response.cell_id;
            }
            if !value_out.is_null() {
                *value_out = response.value;
            }
        }
        TissueStatus::Ok
    })
}

/// The message for the calling thread's most recent failure. The pointer
/// stays valid until the next failing call on this thread. Empty before
/// any failure.
#[no_mangle]
pub extern "C" fn tissue_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// The library version as a static string.
#[no_mangle]
pub extern "C" fn tissue_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
