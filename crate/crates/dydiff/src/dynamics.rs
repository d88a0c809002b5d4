//! The temporal mixture operator and its exact inverse.
//!
//! `dynamics` blends each state with the running mixture of its predecessors,
//!
//! ```text
//! d^L = x^L,    d^s = sqrt(gamma_bar) * x^s + sqrt(1 - gamma_bar) * d^{s-1}
//! ```
//!
//! and `inverse_dynamics` undoes it exactly:
//!
//! ```text
//! x^L = d^L,    x^s = (d^s - sqrt(1 - gamma_bar) * d^{s-1}) / sqrt(gamma_bar)
//! ```
//!
//! Both are pure and never mutate their inputs. Inversion amplifies error by
//! `1/sqrt(gamma_bar)` per state, so `inverse_dynamics` rejects
//! `gamma_bar < GAMMA_BAR_FLOOR`; the default schedule keeps
//! `gamma_bar >= 1 - eta`, far above the floor.

use crate::error::{DyDiffError, Result};
use crate::sequence::StateSequence;
use crate::Scalar;

/// Smallest `gamma_bar` accepted by [`inverse_dynamics`].
pub const GAMMA_BAR_FLOOR: f64 = 1e-6;

fn check_gamma_bar<F: Scalar>(gamma_bar: F) -> Result<()> {
    let g = gamma_bar.to_f64().unwrap_or(f64::NAN);
    if !(g > 0.0 && g <= 1.0) {
        return Err(DyDiffError::GammaBarOutOfRange(g));
    }
    Ok(())
}

/// Applies the recursive history mixture over the full index range.
pub fn dynamics<F: Scalar>(x: &StateSequence<F>, gamma_bar: F) -> Result<StateSequence<F>> {
    check_gamma_bar(gamma_bar)?;
    let w_cur = gamma_bar.sqrt();
    let w_prev = (F::one() - gamma_bar).sqrt();
    let mut out = x.clone();
    let frame_len = x.frame_len();
    let data = out.as_mut_slice();
    for i in frame_len..data.len() {
        data[i] = w_cur * data[i] + w_prev * data[i - frame_len];
    }
    Ok(out)
}

/// Recovers the original states from a `dynamics` output.
pub fn inverse_dynamics<F: Scalar>(d: &StateSequence<F>, gamma_bar: F) -> Result<StateSequence<F>> {
    check_gamma_bar(gamma_bar)?;
    let g = gamma_bar.to_f64().unwrap_or(f64::NAN);
    if g < GAMMA_BAR_FLOOR {
        return Err(DyDiffError::GammaBarBelowFloor {
            value: g,
            floor: GAMMA_BAR_FLOOR,
        });
    }
    let w_cur = gamma_bar.sqrt();
    let w_prev = (F::one() - gamma_bar).sqrt();
    let mut out = d.clone();
    let frame_len = d.frame_len();
    let src = d.as_slice();
    let data = out.as_mut_slice();
    for i in frame_len..data.len() {
        data[i] = (src[i] - w_prev * src[i - frame_len]) / w_cur;
    }
    Ok(out)
}
