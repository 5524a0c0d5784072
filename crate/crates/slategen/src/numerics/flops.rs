//! Process-wide FLOP counter.
//!
//! Only multiply-accumulate work is charged (matrix products at
//! `2 * m * k * n`), matching the accounting convention of the closed-form
//! cost model in [`crate::evaluation`]. Elementwise maps, softmax
//! exponentials, and residual additions are deliberately uncounted; the
//! comparison report attributes the resulting deltas.
//!
//! The counter is a single atomic so concurrent forward passes accumulate
//! correctly; tests that need an isolated window serialize on
//! [`measure_lock`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, OnceLock};

static COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn add(n: u64) {
    COUNTER.fetch_add(n, Ordering::Relaxed);
}

pub fn read() -> u64 {
    COUNTER.load(Ordering::Relaxed)
}

pub fn reset() {
    COUNTER.store(0, Ordering::Relaxed);
}

/// Guard serializing counter windows across test threads. `cargo test` runs
/// tests concurrently in one process; measurements that reset or difference
/// the counter must hold this lock to avoid charging each other's work.
pub fn measure_lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    match LOCK.get_or_init(|| Mutex::new(())).lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

/// Runs `f` under the measurement lock and returns (result, flops charged).
pub fn measured<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let _guard = measure_lock();
    let before = read();
    let out = f();
    let after = read();
    (out, after - before)
}
