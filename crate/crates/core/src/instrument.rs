//! Debug-build tracer for floating-point work.
//!
//! Every library routine that performs floating-point arithmetic reports one
//! event here. The integer inference path must never report any. Tracing is
//! compiled in only with `debug_assertions`; it is switched on either with the
//! `IRNN_TRACE_FLOAT_OPS` environment variable (any value other than `0`) or
//! per thread with [`set_tracing`].

use std::cell::Cell;
use std::sync::OnceLock;

/// Environment variable that enables float-op tracing in debug builds.
pub const TRACE_ENV: &str = "IRNN_TRACE_FLOAT_OPS";

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
    static FORCED: Cell<Option<bool>> = const { Cell::new(None) };
}

fn env_enabled() -> bool {
    static ENV: OnceLock<bool> = OnceLock::new();
    *ENV.get_or_init(|| std::env::var(TRACE_ENV).map(|v| v != "0").unwrap_or(false))
}

/// Whether float-op events are being counted on this thread.
pub fn tracing_enabled() -> bool {
    cfg!(debug_assertions) && FORCED.with(|f| f.get()).unwrap_or_else(env_enabled)
}

/// Overrides the environment setting for the current thread.
pub fn set_tracing(on: bool) {
    FORCED.with(|f| f.set(Some(on)));
}

/// Number of float-op events recorded on this thread since the last reset.
pub fn float_op_count() -> u64 {
    COUNT.with(|c| c.get())
}

pub fn reset_float_op_count() {
    COUNT.with(|c| c.set(0));
}

#[inline]
pub(crate) fn float_op() {
    #[cfg(debug_assertions)]
    if tracing_enabled() {
        COUNT.with(|c| c.set(c.get() + 1));
    }
}
