//! C ABI over the photonstat library.
//!
//! Streams and histograms are opaque handles created and freed here; all
//! other arguments and results are plain C scalars, strings, and caller
//! buffers. Every entry point catches panics and reports failures through
//! [`PsStatus`]; the message behind the most recent failure on the current
//! thread is available from [`ps_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use photonstat::correlate::{self, CorrectionMode, CorrelateError};
use photonstat::stream::{read_stream, write_stream, PhotonStream, StreamError};
use photonstat::trace::bin_intensity;
use photonstat::{CorrelationHistogram, SimulationConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PsStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArg = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// File or stream I/O failed.
    Io = 3,
    /// Invalid configuration or parameters.
    Config = 4,
    /// The analysis could not produce a result.
    Analysis = 5,
    /// An internal panic was caught.
    Panic = 6,
}

/// Opaque photon stream handle.
pub struct PsStream(PhotonStream);

/// Opaque correlation histogram handle.
pub struct PsHistogram(CorrelationHistogram);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: PsStatus, message: &str) -> PsStatus {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn guard<F: FnOnce() -> PsStatus>(body: F) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(PsStatus::Panic, "internal panic"),
    }
}

fn stream_error(e: StreamError) -> PsStatus {
    fail(PsStatus::Io, &e.to_string())
}

fn correlate_error(e: CorrelateError) -> PsStatus {
    let status = match e {
        CorrelateError::Io(_) => PsStatus::Io,
        CorrelateError::UnknownChannel { .. }
        | CorrelateError::InvalidBin { .. }
        | CorrelateError::SpanTooShort { .. }
        | CorrelateError::DurationTooShort { .. }
        | CorrelateError::ModeMismatch { .. } => PsStatus::Config,
        CorrelateError::InsufficientCounts
        | CorrelateError::NoPlateau
        | CorrelateError::InsufficientRange { .. } => PsStatus::Analysis,
    };
    fail(status, &e.to_string())
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, PsStatus> {
    if ptr.is_null() {
        return Err(fail(PsStatus::NullArg, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(PsStatus::Utf8, "string argument is not UTF-8"))
}

/// Message behind the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Reads a PSTR file into a new stream handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_read(path: *const c_char, out: *mut *mut PsStream) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsStatus::NullArg, "null output handle");
        }
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_stream(Path::new(path)) {
            Ok(stream) => {
                *out = Box::into_raw(Box::new(PsStream(stream)));
                PsStatus::Ok
            }
            Err(e) => stream_error(e),
        }
    })
}

/// Writes a stream handle to a PSTR file.
///
/// # Safety
/// `stream` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_write(stream: *const PsStream, path: *const c_char) -> PsStatus {
    guard(|| {
        let Some(stream) = stream.as_ref() else {
            return fail(PsStatus::NullArg, "null stream handle");
        };
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_stream(&stream.0, Path::new(path)) {
            Ok(()) => PsStatus::Ok,
            Err(e) => stream_error(e),
        }
    })
}

/// Simulates a photon stream from a JSON-encoded configuration. Absent
/// fields take their defaults, so `"{}"` is a valid configuration.
///
/// # Safety
/// `config_json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_simulate(
    config_json: *const c_char,
    out: *mut *mut PsStream,
) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsStatus::NullArg, "null output handle");
        }
        let text = match utf8_arg(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config: SimulationConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(PsStatus::Config, &format!("config: {e}")),
        };
        match photonstat::simulate(&config) {
            Ok(stream) => {
                *out = Box::into_raw(Box::new(PsStream(stream)));
                PsStatus::Ok
            }
            Err(e) => fail(PsStatus::Config, &e.to_string()),
        }
    })
}

/// Frees a stream handle; null is ignored.
///
/// # Safety
/// `stream` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_free(stream: *mut PsStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Number of photon records in the stream.
///
/// # Safety
/// `stream` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_record_count(stream: *const PsStream) -> u64 {
    stream.as_ref().map_or(0, |s| s.0.records.len() as u64)
}

/// Acquisition duration in seconds.
///
/// # Safety
/// `stream` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_duration(stream: *const PsStream) -> f64 {
    stream.as_ref().map_or(0.0, |s| s.0.header.duration)
}

/// Excitation sync rate in Hz.
///
/// # Safety
/// `stream` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ps_stream_sync_rate(stream: *const PsStream) -> f64 {
    stream.as_ref().map_or(0.0, |s| s.0.header.sync_rate)
}

/// Correlates two channels into a pulsed (linear, signed-delay) histogram.
///
/// # Safety
/// `stream` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_g2_pulsed(
    stream: *const PsStream,
    channel_a: u8,
    channel_b: u8,
    bin_width: f64,
    span: f64,
    out: *mut *mut PsHistogram,
) -> PsStatus {
    guard(|| {
        let Some(stream) = stream.as_ref() else {
            return fail(PsStatus::NullArg, "null stream handle");
        };
        if out.is_null() {
            return fail(PsStatus::NullArg, "null output handle");
        }
        match correlate::correlate_pulsed(&stream.0, channel_a, channel_b, bin_width, span) {
            Ok(hist) => {
                *out = Box::into_raw(Box::new(PsHistogram(hist)));
                PsStatus::Ok
            }
            Err(e) => correlate_error(e),
        }
    })
}

/// Correlates two channels into a logarithmic long-delay histogram.
///
/// # Safety
/// `stream` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_g2_long(
    stream: *const PsStream,
    channel_a: u8,
    channel_b: u8,
    tau_min: f64,
    tau_max: f64,
    bins_per_decade: usize,
    out: *mut *mut PsHistogram,
) -> PsStatus {
    guard(|| {
        let Some(stream) = stream.as_ref() else {
            return fail(PsStatus::NullArg, "null stream handle");
        };
        if out.is_null() {
            return fail(PsStatus::NullArg, "null output handle");
        }
        match correlate::correlate_long_delay(
            &stream.0,
            channel_a,
            channel_b,
            tau_min,
            tau_max,
            bins_per_decade,
        ) {
            Ok(hist) => {
                *out = Box::into_raw(Box::new(PsHistogram(hist)));
                PsStatus::Ok
            }
            Err(e) => correlate_error(e),
        }
    })
}

/// Frees a histogram handle; null is ignored.
///
/// # Safety
/// `hist` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_histogram_free(hist: *mut PsHistogram) {
    if !hist.is_null() {
        drop(Box::from_raw(hist));
    }
}

/// Number of delay bins in the histogram.
///
/// # Safety
/// `hist` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ps_histogram_len(hist: *const PsHistogram) -> usize {
    hist.as_ref().map_or(0, |h| h.0.tau.len())
}

/// Copies the delay axis, counts, and normalized g2 into caller buffers.
/// Any of the three buffers may be null to skip that column; non-null
/// buffers must hold at least `ps_histogram_len` elements, declared via
/// `cap`.
///
/// # Safety
/// `hist` must be a live handle; non-null buffers must be writable for
/// `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ps_histogram_copy(
    hist: *const PsHistogram,
    tau: *mut f64,
    counts: *mut u64,
    g2: *mut f64,
    cap: usize,
) -> PsStatus {
    guard(|| {
        let Some(hist) = hist.as_ref() else {
            return fail(PsStatus::NullArg, "null histogram handle");
        };
        let n = hist.0.tau.len();
        if cap < n {
            return fail(
                PsStatus::Config,
                &format!("buffer of {cap} elements cannot hold {n} bins"),
            );
        }
        if !tau.is_null() {
            std::ptr::copy_nonoverlapping(hist.0.tau.as_ptr(), tau, n);
        }
        if !counts.is_null() {
            std::ptr::copy_nonoverlapping(hist.0.counts.as_ptr(), counts, n);
        }
        if !g2.is_null() {
            std::ptr::copy_nonoverlapping(hist.0.g2.as_ptr(), g2, n);
        }
        PsStatus::Ok
    })
}

/// Extracts single-photon purity from a pulsed histogram. `correction` is
/// 0 none, 1 plateau subtraction, 2 amplitude subtraction. Output pointers
/// may be null to skip a value.
///
/// # Safety
/// `hist` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_histogram_purity(
    hist: *const PsHistogram,
    correction: i32,
    g2_raw: *mut f64,
    g2_corrected: *mut f64,
    uncertainty: *mut f64,
) -> PsStatus {
    guard(|| {
        let Some(hist) = hist.as_ref() else {
            return fail(PsStatus::NullArg, "null histogram handle");
        };
        let mode = match correction {
            0 => CorrectionMode::None,
            1 => CorrectionMode::Plateau,
            2 => CorrectionMode::Amplitude,
            other => {
                return fail(
                    PsStatus::Config,
                    &format!("unknown correction mode {other}"),
                )
            }
        };
        match correlate::subtract_background(&hist.0, mode) {
            Ok(purity) => {
                if !g2_raw.is_null() {
                    *g2_raw = purity.g2_raw;
                }
                if !g2_corrected.is_null() {
                    *g2_corrected = purity.g2_corrected;
                }
                if !uncertainty.is_null() {
                    *uncertainty = purity.uncertainty;
                }
                PsStatus::Ok
            }
            Err(e) => correlate_error(e),
        }
    })
}

/// Bins the stream into an intensity trace. Call with a null `out` buffer
/// to query the bin count through `len`; call again with a buffer of at
/// least that many elements.
///
/// # Safety
/// `stream` must be a live handle; `len` must be valid; a non-null `out`
/// must be writable for `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn ps_intensity_trace(
    stream: *const PsStream,
    bin_time: f64,
    out: *mut u64,
    cap: usize,
    len: *mut usize,
) -> PsStatus {
    guard(|| {
        let Some(stream) = stream.as_ref() else {
            return fail(PsStatus::NullArg, "null stream handle");
        };
        if len.is_null() {
            return fail(PsStatus::NullArg, "null length pointer");
        }
        if !(bin_time.is_finite() && bin_time > 0.0) {
            return fail(PsStatus::Config, "bin_time must be positive");
        }
        let trace = bin_intensity(&stream.0, bin_time);
        *len = trace.counts.len();
        if out.is_null() {
            return PsStatus::Ok;
        }
        if cap < trace.counts.len() {
            return fail(
                PsStatus::Config,
                &format!(
                    "buffer of {cap} elements cannot hold {} bins",
                    trace.counts.len()
                ),
            );
        }
        std::ptr::copy_nonoverlapping(trace.counts.as_ptr(), out, trace.counts.len());
        PsStatus::Ok
    })
}
