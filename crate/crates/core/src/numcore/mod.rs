//! Dense tensors with a small reverse-mode tape.
//!
//! Only the operations the recurrent classifier and its losses need are
//! provided. Everything is generic over [`Scalar`] so the same code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{matmul, Tensor};

use crate::error::{Error, Result};

/// Sets flush-to-zero and denormals-are-zero for the calling thread.
///
/// Subnormal floats are handled in microcode on x86 and can make a training
/// step two orders of magnitude slower once activations or Adam moments
/// decay towards zero. Training calls this; the f64 gradient checks do not.
pub fn flush_denormals() {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    #[allow(deprecated)]
    // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags of MXCSR change.
    unsafe {
        #[cfg(target_arch = "x86")]
        use std::arch::x86::{_mm_getcsr, _mm_setcsr};
        #[cfg(target_arch = "x86_64")]
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        _mm_setcsr(_mm_getcsr() | 0x8040);
    }
}

/// Lower clamp applied to `q` before the division inside [`kl_divergence`].
pub const KL_Q_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S], inv_t: S) {
    let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = ((*v - mx) * inv_t).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `softmax(z / temperature)` with max subtraction.
pub fn softmax_t<S: Scalar>(z: &[S], temperature: S) -> Result<Vec<S>> {
    if z.is_empty() {
        return Err(Error::Parameter("softmax of an empty vector".into()));
    }
    if !(temperature > S::zero()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature:?}"
        )));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out, S::one() / temperature);
    Ok(out)
}

/// `Σ p_i ln(p_i / q_i)`, with `0 · ln(0/q) = 0` and `q` clamped at
/// [`KL_Q_FLOOR`].
pub fn kl_divergence<S: Scalar>(p: &[S], q: &[S]) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kl_divergence",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    let floor = S::lit(KL_Q_FLOOR);
    let mut acc = S::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > S::zero() {
            acc += pi * (pi / qi.max(floor)).ln();
        }
    }
    Ok(acc.max(S::zero()))
}

#[cfg(test)]
mod tests;
