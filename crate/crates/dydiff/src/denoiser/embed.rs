//! Sinusoidal timestep embeddings.

use crate::Real;

const MAX_PERIOD: Real = 10_000.0;

/// Standard sinusoidal embedding of an integer timestep: interleaved
/// `sin(t * w_i), cos(t * w_i)` with geometrically spaced frequencies from 1
/// down to `1 / MAX_PERIOD`. `dim` must be even and positive.
pub fn time_embedding(t: usize, dim: usize) -> Vec<Real> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let tf = t as Real;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half == 1 {
            0.0
        } else {
            i as Real / (half - 1) as Real
        };
        let freq = MAX_PERIOD.powf(-exponent);
        out.push((tf * freq).sin());
        out.push((tf * freq).cos());
    }
    out
}
