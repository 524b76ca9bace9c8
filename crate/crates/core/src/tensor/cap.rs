//! Element cap guarding every full-tensor materialization.
//!
//! The cap is process-wide so that deeply nested constructions (grids inside
//! experiment trials inside the CLI) all see the same limit without threading
//! it through every signature.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ELEMENTS: usize = 10_000_000;

static MAX_ELEMENTS: AtomicUsize = AtomicUsize::new(DEFAULT_MAX_ELEMENTS);

pub fn max_elements() -> usize {
    MAX_ELEMENTS.load(Ordering::Relaxed)
}

pub fn set_max_elements(cap: usize) {
    MAX_ELEMENTS.store(cap, Ordering::Relaxed);
}

/// Product of `dims` without overflow. Saturates at `u128::MAX`.
pub fn element_count(dims: &[usize]) -> u128 {
    dims.iter().try_fold(1u128, |acc, &d| acc.checked_mul(d as u128)).unwrap_or(u128::MAX)
}

/// Checks that a tensor with the given mode sizes fits under the cap and
/// returns its element count.
pub fn check_capacity(dims: &[usize]) -> Result<usize> {
    check_count(element_count(dims))
}

pub fn check_count(requested: u128) -> Result<usize> {
    let cap = max_elements();
    if requested > cap as u128 {
        return Err(Error::Capacity { requested, cap });
    }
    Ok(requested as usize)
}

/// `base^exp` as an overflow-free element count.
pub fn pow_count(base: usize, exp: usize) -> u128 {
    let mut acc = 1u128;
    for _ in 0..exp {
        acc = match acc.checked_mul(base as u128) {
            Some(v) => v,
            None => return u128::MAX,
        };
    }
    acc
}
