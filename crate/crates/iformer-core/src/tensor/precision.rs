//! Global numeric precision mode.
//!
//! Values are always held as `f64` in memory; in [`Precision::F32`] mode every
//! stored tensor value is rounded to the nearest `f32` after each operation,
//! so the numerics match 32-bit storage while one code path serves both modes.
//! 64-bit mode is the "check mode" used by gradient verification and any test
//! that asserts bit-exactness.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static MODE: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn precision() -> Precision {
    MODE.with(|m| m.get())
}

pub fn set_precision(p: Precision) {
    MODE.with(|m| m.set(p));
}

/// Round a buffer to storage precision (no-op in 64-bit mode).
pub fn quantize(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// RAII guard that sets the precision mode for a scope and restores the
/// previous mode on drop. Used by tests and by the gradient checker.
pub struct PrecisionGuard {
    prev: Precision,
}

impl PrecisionGuard {
    pub fn new(p: Precision) -> Self {
        let prev = precision();
        set_precision(p);
        PrecisionGuard { prev }
    }
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_precision(self.prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_in_f32_mode() {
        let _g = PrecisionGuard::new(Precision::F32);
        let mut v = [0.1f64, 1.0 / 3.0];
        quantize(&mut v);
        assert_eq!(v[0], 0.1f32 as f64);
        assert_eq!(v[1], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn quantize_is_identity_in_f64_mode() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut v = [0.1f64, 1.0 / 3.0];
        let orig = v;
        quantize(&mut v);
        assert_eq!(v, orig);
    }

    #[test]
    fn guard_restores_previous_mode() {
        set_precision(Precision::F32);
        {
            let _g = PrecisionGuard::new(Precision::F64);
            assert_eq!(precision(), Precision::F64);
        }
        assert_eq!(precision(), Precision::F32);
    }
}
