//! Scalar float helpers routed through `libm`.
//!
//! Platform libms disagree in the last ulp for transcendentals, which would
//! break bit-level reproducibility of checkpoints and sweep output across
//! machines. `libm` is pure Rust and gives the same bits everywhere.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}
