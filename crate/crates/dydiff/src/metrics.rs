//! Probabilistic and deterministic forecast metrics: neighborhood CRPS with
//! average/max pooling, CSI with window pooling, PSNR, and the summed CRPS
//! for multivariate series.
//!
//! Pooling is a valid (no padding) sliding window of size `w` with stride 1
//! over the trailing spatial dims: `[D]` frames pool along the single axis,
//! `[H, W]` frames pool over `w x w` patches. `w = 1` is the identity; `w`
//! equal to the full extent reduces a frame to its spatial mean (for `avg`).

use crate::error::{DyDiffError, Result};
use crate::sequence::StateSequence;
use crate::{Real, Scalar};

/// Ensemble of `M` predicted state sequences over `1..=S`, one per member.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<StateSequence>,
}

impl Ensemble {
    pub fn new(members: Vec<StateSequence>) -> Result<Self> {
        let first = members
            .first()
            .ok_or(DyDiffError::EmptySequence)?;
        for m in &members[1..] {
            if m.frame_shape() != first.frame_shape()
                || m.num_frames() != first.num_frames()
                || m.start() != first.start()
            {
                return Err(DyDiffError::ShapeMismatch {
                    expected: first.frame_shape().to_vec(),
                    got: m.frame_shape().to_vec(),
                });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[StateSequence] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Neighborhood pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    Avg,
    Max,
}

/// Valid sliding-window pooling over the trailing 1 or 2 spatial dims.
pub fn pool_frame<F: Scalar>(frame: &[F], shape: &[usize], w: usize, pool: Pool) -> Result<Vec<F>> {
    if w == 0 {
        return Err(DyDiffError::InvalidInput("pool window must be >= 1".into()));
    }
    let reduce = |vals: &mut dyn Iterator<Item = F>| -> F {
        match pool {
            Pool::Avg => {
                let mut sum = F::zero();
                let mut n = 0usize;
                for v in vals {
                    sum = sum + v;
                    n += 1;
                }
                sum / F::from_usize(n).unwrap()
            }
            Pool::Max => vals.fold(F::neg_infinity(), |a, b| a.max(b)),
        }
    };
    match shape {
        [d] => {
            if w > *d {
                return Err(DyDiffError::InvalidInput(format!(
                    "pool window {w} exceeds extent {d}"
                )));
            }
            Ok((0..=d - w)
                .map(|o| reduce(&mut frame[o..o + w].iter().copied()))
                .collect())
        }
        [h, wd] => {
            if w > *h || w > *wd {
                return Err(DyDiffError::InvalidInput(format!(
                    "pool window {w} exceeds extent {h}x{wd}"
                )));
            }
            let mut out = Vec::with_capacity((h - w + 1) * (wd - w + 1));
            for y in 0..=h - w {
                for x in 0..=wd - w {
                    let mut it = (0..w).flat_map(|dy| {
                        let row = (y + dy) * wd + x;
                        frame[row..row + w].iter().copied()
                    });
                    out.push(reduce(&mut it));
                }
            }
            Ok(out)
        }
        other => Err(DyDiffError::InvalidInput(format!(
            "pooling supports [D] or [H, W] frames, got {other:?}"
        ))),
    }
}

/// Sample CRPS of a sorted ensemble against one observation:
/// `mean|X - y| - (1 / 2M^2) sum_ij |X_i - X_j|`.
fn crps_sorted(sorted: &[Real], y: Real) -> Real {
    let m = sorted.len() as Real;
    let mae = sorted.iter().map(|x| (x - y).abs()).sum::<Real>() / m;
    // sum_{i<j} (x_(j) - x_(i)) = sum_k (2k - M + 1) x_(k), 0-based k.
    let spread = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * k as Real - m + 1.0) * x)
        .sum::<Real>();
    mae - spread / (m * m)
}

/// Neighborhood CRPS: pools members and truth, then averages the sample CRPS
/// estimator over all pooled elements and states.
pub fn crps_ensemble(
    ensemble: &Ensemble,
    truth: &StateSequence,
    pool: Pool,
    w: usize,
) -> Result<Real> {
    if ensemble.len() < 2 {
        return Err(DyDiffError::InvalidInput(
            "CRPS needs at least 2 ensemble members".into(),
        ));
    }
    let first = &ensemble.members()[0];
    if truth.frame_shape() != first.frame_shape() || truth.num_frames() != first.num_frames() {
        return Err(DyDiffError::ShapeMismatch {
            expected: first.frame_shape().to_vec(),
            got: truth.frame_shape().to_vec(),
        });
    }
    let shape = truth.frame_shape().to_vec();
    let m = ensemble.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for s in truth.start()..=truth.end() {
        let pooled_truth = pool_frame(truth.frame(s), &shape, w, pool)?;
        let pooled_members: Vec<Vec<Real>> = ensemble
            .members()
            .iter()
            .map(|mem| pool_frame(mem.frame(s), &shape, w, pool))
            .collect::<Result<_>>()?;
        let mut buf = vec![0.0; m];
        for (e, y) in pooled_truth.iter().enumerate() {
            for (i, mem) in pooled_members.iter().enumerate() {
                buf[i] = mem[e];
            }
            buf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite metric inputs"));
            total += crps_sorted(&buf, *y);
            count += 1;
        }
    }
    Ok(total / count as Real)
}

/// Critical Success Index after pooling and thresholding:
/// `hits / (hits + misses + false alarms)`; defined as 1 when no cell is
/// positive in either field (a perfect all-negative forecast).
pub fn csi(
    pred: &StateSequence,
    truth: &StateSequence,
    threshold: Real,
    w: usize,
    pool: Pool,
) -> Result<Real> {
    if truth.frame_shape() != pred.frame_shape() || truth.num_frames() != pred.num_frames() {
        return Err(DyDiffError::ShapeMismatch {
            expected: pred.frame_shape().to_vec(),
            got: truth.frame_shape().to_vec(),
        });
    }
    let shape = truth.frame_shape().to_vec();
    let (mut hits, mut misses, mut false_alarms) = (0u64, 0u64, 0u64);
    for s in truth.start()..=truth.end() {
        let p = pool_frame(pred.frame(s), &shape, w, pool)?;
        let t = pool_frame(truth.frame(s), &shape, w, pool)?;
        for (pv, tv) in p.iter().zip(&t) {
            match (*pv >= threshold, *tv >= threshold) {
                (true, true) => hits += 1,
                (false, true) => misses += 1,
                (true, false) => false_alarms += 1,
                (false, false) => {}
            }
        }
    }
    let denom = hits + misses + false_alarms;
    if denom == 0 {
        Ok(1.0)
    } else {
        Ok(hits as Real / denom as Real)
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` when the fields are identical.
pub fn psnr(pred: &StateSequence, truth: &StateSequence, data_range: Real) -> Result<Real> {
    if !(data_range > 0.0) {
        return Err(DyDiffError::InvalidInput(
            "data_range must be positive".into(),
        ));
    }
    if truth.frame_shape() != pred.frame_shape() || truth.num_frames() != pred.num_frames() {
        return Err(DyDiffError::ShapeMismatch {
            expected: pred.frame_shape().to_vec(),
            got: truth.frame_shape().to_vec(),
        });
    }
    let n = pred.as_slice().len() as Real;
    let mse = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<Real>()
        / n;
    if mse == 0.0 {
        return Ok(Real::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Summed CRPS of a multivariate series ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrpsSumResult {
    pub value: Real,
    /// False when the normalizer (mean absolute summed truth) was zero and
    /// the raw value is returned instead.
    pub normalized: bool,
}

/// Sums members and truth across the variate dimension per time step, applies
/// the plain CRPS estimator per step, and normalizes by the mean absolute
/// summed truth (the usual convention for this score).
pub fn crps_sum(ensemble: &Ensemble, truth: &StateSequence) -> Result<CrpsSumResult> {
    if ensemble.len() < 2 {
        return Err(DyDiffError::InvalidInput(
            "CRPS needs at least 2 ensemble members".into(),
        ));
    }
    let first = &ensemble.members()[0];
    if truth.frame_shape() != first.frame_shape() || truth.num_frames() != first.num_frames() {
        return Err(DyDiffError::ShapeMismatch {
            expected: first.frame_shape().to_vec(),
            got: truth.frame_shape().to_vec(),
        });
    }
    let m = ensemble.len();
    let mut num = 0.0;
    let mut denom = 0.0;
    let steps = truth.num_frames() as Real;
    let mut buf = vec![0.0; m];
    for s in truth.start()..=truth.end() {
        let y: Real = truth.frame(s).iter().sum();
        for (i, mem) in ensemble.members().iter().enumerate() {
            buf[i] = mem.frame(s).iter().sum();
        }
        buf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite metric inputs"));
        num += crps_sorted(&buf, y) / steps;
        denom += y.abs() / steps;
    }
    if denom == 0.0 {
        Ok(CrpsSumResult {
            value: num,
            normalized: false,
        })
    } else {
        Ok(CrpsSumResult {
            value: num / denom,
            normalized: true,
        })
    }
}
