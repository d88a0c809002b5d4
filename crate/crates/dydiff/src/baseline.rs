//! Standard (conditional) diffusion reference implementations.
//!
//! These are the eta = 0 counterparts of the DyDiff trainer and samplers:
//! straight-line code with no dynamics operators anywhere. They serve both as
//! the `dpm-*` sampler kinds and as the reduction oracles the test suite
//! compares the DyDiff paths against under shared RNG streams.
//!
//! RNG draw order is part of the contract and mirrors the DyDiff paths
//! exactly: one `1..=S` normal block at initialization, then (for stochastic
//! samplers) one `1..=S` block per step with `t_lo > 0`, drawn after the
//! denoiser call. Training examples draw `t ~ U[1, T]` first, then the
//! `1..=S` noise block.

use rand::Rng;

use crate::data::SequenceWindow;
use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::error::Result;
use crate::forward::LatentBlock;
use crate::rng::standard_normal_seq;
use crate::sequence::StateSequence;
use crate::{Real, Schedule};

/// Standard training pair: input `sqrt(ab_t) x^{1:S} + sqrt(1-ab_t) eps`,
/// target `eps`, with `t ~ U[1, T]`.
pub fn std_training_example<R: Rng + ?Sized>(
    window: &SequenceWindow,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<(DenoiserInput, StateSequence)> {
    let t = rng.gen_range(1..=schedule.t_max());
    let eps = standard_normal_seq(rng, 1, window.s() as i64, window.frame_shape());
    let latents = window
        .targets()
        .affine(schedule.signal_coef(t), &eps, schedule.noise_coef(t))?;
    Ok((
        DenoiserInput {
            noisy: LatentBlock::new(latents, t)?,
            observations: window.observations().clone(),
            t,
        },
        eps,
    ))
}

/// Standard conditional DDIM sampling along `timesteps` (descending, from T
/// to 0). With `stochastic`, DDPM-consistent noise is injected per step.
#[allow(clippy::too_many_arguments)]
pub fn std_ddim_sample<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    observations: &StateSequence,
    s_len: usize,
    schedule: &Schedule,
    timesteps: &[usize],
    stochastic: bool,
    rng: &mut R,
    mut trace: Option<&mut Vec<(usize, StateSequence)>>,
) -> Result<StateSequence> {
    let mut x = standard_normal_seq(rng, 1, s_len as i64, observations.frame_shape());
    if let Some(tr) = trace.as_deref_mut() {
        tr.push((timesteps[0], x.clone()));
    }
    for pair in timesteps.windows(2) {
        let (t, t_lo) = (pair[0], pair[1]);
        let eps = predictor.predict_noise(&LatentBlock::new(x.clone(), t)?, observations, t)?;
        let (sc, nc) = (schedule.signal_coef(t), schedule.noise_coef(t));
        let x0 = x.zip_map(&eps, |xv, ev| (xv - nc * ev) / sc)?;
        let sig = if stochastic && t_lo > 0 {
            schedule.ddpm_sigma_between(t, t_lo)
        } else {
            0.0
        };
        let coef = (1.0 - schedule.alpha_bar(t_lo) - sig * sig).sqrt();
        x = x0.affine(schedule.signal_coef(t_lo), &eps, coef)?;
        if stochastic && t_lo > 0 {
            let z = standard_normal_seq(rng, 1, s_len as i64, observations.frame_shape());
            x = x.affine(1.0, &z, sig)?;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t_lo, x.clone()));
        }
    }
    Ok(x)
}

/// Standard conditional ancestral (DDPM) sampling along `timesteps`; with
/// `stochastic = false` it degenerates to iterating the posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn std_ddpm_sample<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    observations: &StateSequence,
    s_len: usize,
    schedule: &Schedule,
    timesteps: &[usize],
    stochastic: bool,
    rng: &mut R,
    mut trace: Option<&mut Vec<(usize, StateSequence)>>,
) -> Result<StateSequence> {
    let mut x = standard_normal_seq(rng, 1, s_len as i64, observations.frame_shape());
    if let Some(tr) = trace.as_deref_mut() {
        tr.push((timesteps[0], x.clone()));
    }
    for pair in timesteps.windows(2) {
        let (t, t_lo) = (pair[0], pair[1]);
        let eps = predictor.predict_noise(&LatentBlock::new(x.clone(), t)?, observations, t)?;
        let (sc, nc) = (schedule.signal_coef(t), schedule.noise_coef(t));
        let x0 = x.zip_map(&eps, |xv, ev| (xv - nc * ev) / sc)?;
        let (c1, c2) = ddpm_mean_coeffs(schedule, t, t_lo);
        x = x0.affine(c1, &x, c2)?;
        if stochastic && t_lo > 0 {
            let sig = schedule.ddpm_sigma_between(t, t_lo);
            let z = standard_normal_seq(rng, 1, s_len as i64, observations.frame_shape());
            x = x.affine(1.0, &z, sig)?;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t_lo, x.clone()));
        }
    }
    Ok(x)
}

/// Posterior-mean coefficients of the standard DDPM step `t -> t_lo`:
/// `mu = c1 * x0_pred + c2 * x_t`.
pub(crate) fn ddpm_mean_coeffs(schedule: &Schedule, t: usize, t_lo: usize) -> (Real, Real) {
    let ab_hi = schedule.alpha_bar(t);
    let ab_lo = schedule.alpha_bar(t_lo);
    let alpha_eff = ab_hi / ab_lo;
    let c1 = ab_lo.sqrt() * (1.0 - alpha_eff) / (1.0 - ab_hi);
    let c2 = alpha_eff.sqrt() * (1.0 - ab_lo) / (1.0 - ab_hi);
    (c1, c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngFactory;
    use crate::schedule::{build_schedule, AlphaBarFamily, SigmaSpec};

    /// Oracle predictor returning a fixed noise block regardless of input.
    struct FixedNoise(StateSequence);

    impl NoisePredictor for FixedNoise {
        fn predict_noise(
            &self,
            _noisy: &LatentBlock,
            _observations: &StateSequence,
            _t: usize,
        ) -> Result<StateSequence> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn ddpm_mean_collapses_to_x0_at_t_zero() {
        let s: Schedule = build_schedule(
            30,
            AlphaBarFamily::default_linear(),
            0.0,
            SigmaSpec::DdpmPosterior,
        )
        .unwrap();
        let (c1, c2) = ddpm_mean_coeffs(&s, 7, 0);
        assert!((c1 - 1.0).abs() < 1e-12);
        assert!(c2.abs() < 1e-12);
    }

    #[test]
    fn exact_noise_oracle_recovers_target_in_one_full_step() {
        // One reverse step from t = T directly to 0 with the true noise as
        // the prediction inverts the forward corruption exactly.
        let s: Schedule = build_schedule(
            40,
            AlphaBarFamily::default_linear(),
            0.0,
            SigmaSpec::Deterministic,
        )
        .unwrap();
        let obs = StateSequence::scalars(0, &[0.2]).unwrap();
        let target = StateSequence::scalars(1, &[0.7, -0.4]).unwrap();
        let t = 25;
        // Corrupt by hand with a known eps.
        let eps = StateSequence::scalars(1, &[0.3, -1.1]).unwrap();
        let x_t = target
            .affine(s.signal_coef(t), &eps, s.noise_coef(t))
            .unwrap();

        // predictor returns the true eps; "sampling" = just the x0 formula.
        let (sc, nc) = (s.signal_coef(t), s.noise_coef(t));
        let x0 = x_t.zip_map(&eps, |xv, ev| (xv - nc * ev) / sc).unwrap();
        for (a, b) in x0.as_slice().iter().zip(target.as_slice()) {
            assert!((a - b).abs() < 1e-10f64);
        }
    }

    #[test]
    fn samplers_are_deterministic_given_streams() {
        let s: Schedule = build_schedule(
            20,
            AlphaBarFamily::default_linear(),
            0.0,
            SigmaSpec::DdpmPosterior,
        )
        .unwrap();
        let obs = StateSequence::scalars(-1, &[0.1, 0.4]).unwrap();
        let pred = FixedNoise(StateSequence::scalars(1, &[0.2, -0.2]).unwrap());
        let ts: Vec<usize> = (0..=20).rev().collect();
        let f = RngFactory::new(5);
        for stochastic in [false, true] {
            let a = std_ddpm_sample(&pred, &obs, 2, &s, &ts, stochastic, &mut f.stream(&[1]), None)
                .unwrap();
            let b = std_ddpm_sample(&pred, &obs, 2, &s, &ts, stochastic, &mut f.stream(&[1]), None)
                .unwrap();
            assert_eq!(a.as_slice(), b.as_slice());
            let c = std_ddim_sample(&pred, &obs, 2, &s, &ts, stochastic, &mut f.stream(&[1]), None)
                .unwrap();
            let d = std_ddim_sample(&pred, &obs, 2, &s, &ts, stochastic, &mut f.stream(&[1]), None)
                .unwrap();
            assert_eq!(c.as_slice(), d.as_slice());
        }
    }
}
