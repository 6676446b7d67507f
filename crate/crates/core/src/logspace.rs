//! Log-domain arithmetic.
//!
//! Every potential, message and lattice cell in the crate is stored as the
//! natural log of a nonnegative quantity, with `f64::NEG_INFINITY` standing
//! for log(0).

use crate::error::{Error, Result};

/// Log of a nonnegative real. `NEG_INFINITY` encodes zero.
pub type LogReal = f64;

pub const LOG_ZERO: LogReal = f64::NEG_INFINITY;

/// `log(e^a + e^b)`, evaluated as `max + ln_1p(e^(min - max))`.
#[inline]
pub fn log_add(a: LogReal, b: LogReal) -> LogReal {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log Σ exp(v)`. Errors on an empty slice.
pub fn log_sum_exp(values: &[LogReal]) -> Result<LogReal> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lse(values))
}

/// Unchecked variant used in inner loops; the empty sum is log(0).
#[inline]
pub fn lse(values: &[LogReal]) -> LogReal {
    let max = values.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Same as [`lse`] over an iterator, without allocating.
#[inline]
pub fn lse_iter<I>(values: I) -> LogReal
where
    I: IntoIterator<Item = LogReal> + Clone,
{
    let max = values.clone().into_iter().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Returns `(v - L, L)` with `L = log_sum_exp(v)`.
pub fn log_normalize(values: &[LogReal]) -> Result<(Vec<LogReal>, LogReal)> {
    let mut out = values.to_vec();
    let total = log_normalize_in_place(&mut out)?;
    Ok((out, total))
}

pub fn log_normalize_in_place(values: &mut [LogReal]) -> Result<LogReal> {
    let total = lse(values);
    if total == LOG_ZERO || total.is_nan() {
        return Err(Error::Degenerate);
    }
    for v in values.iter_mut() {
        *v -= total;
    }
    Ok(total)
}

/// Exponentiates a normalized log vector into probabilities.
pub fn to_probabilities(values: &[LogReal]) -> Vec<f64> {
    values.iter().map(|v| v.exp()).collect()
}

/// `x ln x` with the `0 ln 0 = 0` convention.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}
