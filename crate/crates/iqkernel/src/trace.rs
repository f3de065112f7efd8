//! Float-arithmetic instrumentation.
//!
//! Every routine in this crate that performs float multiplies or divides
//! reports its op count here. The integer forward path runs inside a
//! strict scope; any float op recorded within one is a purity violation.
//! Counters are thread-local, so concurrent tests do not interfere.

use std::cell::Cell;

thread_local! {
    static FLOAT_OPS: Cell<u64> = const { Cell::new(0) };
    static STRICT: Cell<bool> = const { Cell::new(false) };
    static VIOLATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Record `n` float arithmetic operations on the current thread.
pub fn count_float(n: usize) {
    FLOAT_OPS.with(|c| c.set(c.get() + n as u64));
    if STRICT.with(|s| s.get()) {
        VIOLATIONS.with(|v| v.set(v.get() + n as u64));
    }
}

/// Total float ops recorded on this thread.
pub fn float_ops() -> u64 {
    FLOAT_OPS.with(|c| c.get())
}

/// Run `f` in a strict integer-only region and return the number of float
/// ops that were (incorrectly) recorded inside it alongside the result.
pub fn strict_scope<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = VIOLATIONS.with(|v| v.get());
    let was = STRICT.with(|s| s.replace(true));
    let out = f();
    STRICT.with(|s| s.set(was));
    let after = VIOLATIONS.with(|v| v.get());
    (out, after - before)
}
