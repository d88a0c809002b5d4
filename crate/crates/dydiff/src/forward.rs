//! The DyDiff forward process.
//!
//! This module samples correlated noise blocks, corrupts clean windows into
//! noisy multi-step latents, exposes the single-state Markovian transition and
//! its Gaussian posterior, and provides the decorrelating change of variables
//! that maps DyDiff latents onto independent standard-diffusion latents.
//!
//! The multi-step latents follow
//!
//! ```text
//! x_t^{1:S} = sqrt(alpha_bar_t) * dynamics(x^{-P:S}, gamma_bar_t)[1:S]
//!           + sqrt(1 - alpha_bar_t) * eps_tilde^{1:S}
//! ```
//!
//! where `eps_tilde = dynamics(eps^{1:S}, gamma_bar_t)` with the noise
//! recursion seeded at `s = 1`. The correlation this induces is
//! `corr(eps_tilde^i, eps_tilde^k) = sqrt(1 - gamma_bar_t)^{|i-k|}` (the
//! covariance actually produced by the recursion; the tests pin it
//! empirically).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::SequenceWindow;
use crate::dynamics::{dynamics, inverse_dynamics};
use crate::error::{DyDiffError, Result};
use crate::sequence::StateSequence;
use crate::{Real, Schedule};

/// A block of non-independent Gaussian noises over states `1..=S`, together
/// with the underlying independent draws.
#[derive(Debug, Clone)]
pub struct CorrelatedNoise {
    eps: StateSequence,
    eps_tilde: StateSequence,
    gamma_bar: Real,
}

impl CorrelatedNoise {
    /// The underlying i.i.d. standard-normal draws `eps^{1:S}`.
    pub fn eps(&self) -> &StateSequence {
        &self.eps
    }

    /// The correlated noises `eps_tilde^{1:S} = dynamics(eps, gamma_bar)`.
    pub fn eps_tilde(&self) -> &StateSequence {
        &self.eps_tilde
    }

    pub fn gamma_bar(&self) -> Real {
        self.gamma_bar
    }
}

/// Noisy multi-step latents `x_t^{1:S}` at one diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    latents: StateSequence,
    t: usize,
}

impl LatentBlock {
    pub fn new(latents: StateSequence, t: usize) -> Result<Self> {
        if latents.start() != 1 {
            return Err(DyDiffError::NonContiguous(format!(
                "latents must cover 1..=S, got {}..={}",
                latents.start(),
                latents.end()
            )));
        }
        Ok(Self { latents, t })
    }

    pub fn latents(&self) -> &StateSequence {
        &self.latents
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn s(&self) -> usize {
        self.latents.num_frames()
    }
}

/// An isotropic Gaussian over a single state, mean shaped like the state.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: StateSequence,
    pub var: Real,
}

/// Draws `eps^{1:S}` i.i.d. standard normal and correlates them with the
/// dynamics mixture (recursion seeded at `s = 1`).
pub fn sample_correlated_noise<R: Rng + ?Sized>(
    s_len: usize,
    frame_shape: &[usize],
    gamma_bar: Real,
    rng: &mut R,
) -> Result<CorrelatedNoise> {
    if s_len == 0 {
        return Err(DyDiffError::EmptySequence);
    }
    let eps = crate::rng::standard_normal_seq(rng, 1, s_len as i64, frame_shape);
    let eps_tilde = dynamics(&eps, gamma_bar)?;
    Ok(CorrelatedNoise {
        eps,
        eps_tilde,
        gamma_bar,
    })
}

/// Samples the forward process at timestep `t` (the corruption used in
/// training): returns the noisy latents and the correlated noise, which is
/// also the training target.
///
/// `t = 0` is the boundary case and returns the clean targets.
pub fn forward_sample<R: Rng + ?Sized>(
    window: &SequenceWindow,
    t: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<(LatentBlock, CorrelatedNoise)> {
    schedule.check_timestep(t)?;
    let gamma_bar = schedule.gamma_bar(t);
    let noise = sample_correlated_noise(window.s(), window.frame_shape(), gamma_bar, rng)?;
    let x_dyn = dynamics(&window.full(), gamma_bar)?.slice(1, window.s() as i64)?;
    let latents = x_dyn.affine(
        schedule.signal_coef(t),
        noise.eps_tilde(),
        schedule.noise_coef(t),
    )?;
    Ok((LatentBlock::new(latents, t)?, noise))
}

/// Affine-Gaussian transition of the single-state Markovian forward process
/// for the jump `t_lo -> t_hi`: `x_hi = scale * x_lo + drift + sqrt(var) * z`.
///
/// Consecutive steps (`t_lo = t_hi - 1`) are the printed single-step
/// transition
///
/// ```text
/// scale = sqrt(alpha_t gamma_t)
/// drift = sqrt(alpha_bar_t) (sqrt(1 - gb_t) Dyn(obs; gb_t)|_0
///                            - sqrt(gamma_t - gb_t) Dyn(obs; gb_{t-1})|_0)
/// var   = 1 - alpha_t gamma_t - alpha_bar_t (1 - gamma_t)
/// ```
///
/// and larger jumps compose it exactly (cumulative ratios replace the
/// per-step ones).
#[derive(Debug, Clone)]
pub(crate) struct MarkovTransition {
    pub scale: Real,
    pub drift: Vec<Real>,
    pub var: Real,
}

pub(crate) fn markov_transition(
    observations: &StateSequence,
    t_hi: usize,
    t_lo: usize,
    schedule: &Schedule,
) -> Result<MarkovTransition> {
    if t_lo >= t_hi {
        return Err(DyDiffError::InvalidInput(format!(
            "markov transition needs t_lo < t_hi, got {t_lo} >= {t_hi}"
        )));
    }
    schedule.check_timestep(t_hi)?;
    if observations.end() != 0 {
        return Err(DyDiffError::NonContiguous(format!(
            "observations must cover -P..=0, got {}..={}",
            observations.start(),
            observations.end()
        )));
    }
    let ab_hi = schedule.alpha_bar(t_hi);
    let ab_lo = schedule.alpha_bar(t_lo);
    let gb_hi = schedule.gamma_bar(t_hi);
    let gb_lo = schedule.gamma_bar(t_lo);
    let alpha_eff = ab_hi / ab_lo;
    let gamma_eff = gb_hi / gb_lo;

    let d_hi = dynamics(observations, gb_hi)?;
    let d_lo = dynamics(observations, gb_lo)?;
    let w_hi = (1.0 - gb_hi).sqrt();
    let w_lo = (gamma_eff - gb_hi).max(0.0).sqrt();
    let sqrt_ab_hi = ab_hi.sqrt();
    let drift = d_hi
        .frame(0)
        .iter()
        .zip(d_lo.frame(0))
        .map(|(&hi, &lo)| sqrt_ab_hi * (w_hi * hi - w_lo * lo))
        .collect();

    let var = 1.0 - alpha_eff * gamma_eff - ab_hi * (1.0 - gamma_eff);
    Ok(MarkovTransition {
        scale: (alpha_eff * gamma_eff).sqrt(),
        drift,
        var: var.max(0.0),
    })
}

/// One step of the Markovian forward process for `S = 1`: samples
/// `q(x_t^1 | x_{t-1}^1, x_0^{-P:1})`.
///
/// The `S > 1` case is handled by composing this step with the decorrelation
/// of [`decorrelate`], not by this function.
pub fn markov_forward_step<R: Rng + ?Sized>(
    x_prev: &LatentBlock,
    observations: &StateSequence,
    t: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<LatentBlock> {
    if x_prev.s() != 1 {
        return Err(DyDiffError::InvalidInput(format!(
            "the Markovian forward process is defined for S = 1, got S = {}",
            x_prev.s()
        )));
    }
    if t == 0 {
        return Err(DyDiffError::TimestepOutOfRange {
            t,
            t_max: schedule.t_max(),
        });
    }
    if x_prev.t() != t - 1 {
        return Err(DyDiffError::InvalidInput(format!(
            "x_prev is at timestep {}, expected {}",
            x_prev.t(),
            t - 1
        )));
    }
    let tr = markov_transition(observations, t, t - 1, schedule)?;
    let std = tr.var.sqrt();
    let mut data = Vec::with_capacity(x_prev.latents().frame_len());
    for (i, &x) in x_prev.latents().frame(1).iter().enumerate() {
        let z: Real = rng.sample(StandardNormal);
        data.push(tr.scale * x + tr.drift[i] + std * z);
    }
    let latents = StateSequence::from_flat(1, x_prev.latents().frame_shape(), data)?;
    LatentBlock::new(latents, t)
}

/// The Gaussian `q(x_{t_lo}^1 | x_{t_hi}^1, x_0^{-P:1})` with the clean state
/// `x^1` replaced by `x_pred`, obtained by conditioning the joint Gaussian of
/// `(x_{t_lo}, x_{t_hi})` assembled from the Markovian forward process.
pub(crate) fn posterior_between(
    x_t: &LatentBlock,
    x_pred: &StateSequence,
    observations: &StateSequence,
    t_hi: usize,
    t_lo: usize,
    schedule: &Schedule,
) -> Result<PosteriorGaussian> {
    if x_t.s() != 1 {
        return Err(DyDiffError::InvalidInput(format!(
            "the posterior is defined for S = 1, got S = {}",
            x_t.s()
        )));
    }
    if x_pred.start() != 1 || x_pred.num_frames() != 1 {
        return Err(DyDiffError::NonContiguous(
            "x_pred must be the single state s = 1".into(),
        ));
    }
    if t_hi == 0 {
        return Err(DyDiffError::TimestepOutOfRange {
            t: 0,
            t_max: schedule.t_max(),
        });
    }
    if x_t.t() != t_hi {
        return Err(DyDiffError::InvalidInput(format!(
            "x_t carries timestep {}, expected {t_hi}",
            x_t.t()
        )));
    }

    // Prior of x_{t_lo}: mean sqrt(alpha_bar) * Dynamics(obs + x_pred)|_1,
    // isotropic variance 1 - alpha_bar.
    let full = observations.concat(x_pred)?;
    let m1 = dynamics(&full, schedule.gamma_bar(t_lo))?
        .slice(1, 1)?
        .map(|v| schedule.signal_coef(t_lo) * v);
    let v1 = 1.0 - schedule.alpha_bar(t_lo);

    // Transition x_{t_lo} -> x_{t_hi}, then scalar Gaussian conditioning.
    let tr = markov_transition(observations, t_hi, t_lo, schedule)?;
    let cov = tr.scale * v1;
    let var_hi = tr.scale * tr.scale * v1 + tr.var;
    let gain = cov / var_hi;

    let mut mean = m1.clone();
    for (i, m) in mean.as_mut_slice().iter_mut().enumerate() {
        let predicted_hi = tr.scale * *m + tr.drift[i];
        *m += gain * (x_t.latents().frame(1)[i] - predicted_hi);
    }
    let var = v1 - gain * cov;
    Ok(PosteriorGaussian {
        mean,
        var: var.max(0.0),
    })
}

/// The posterior `q(x_{t-1}^1 | x_t^1, x_0^{-P:0}, x_pred)` for consecutive
/// timesteps; see [`posterior_between`].
pub fn posterior(
    x_t: &LatentBlock,
    x_pred: &StateSequence,
    observations: &StateSequence,
    t: usize,
    schedule: &Schedule,
) -> Result<PosteriorGaussian> {
    if t == 0 {
        return Err(DyDiffError::TimestepOutOfRange {
            t,
            t_max: schedule.t_max(),
        });
    }
    posterior_between(x_t, x_pred, observations, t, t - 1, schedule)
}

/// Change of variables that makes the latents independent across states:
/// `y^1 = x^1`, `y^s = (x^s - sqrt(1 - gamma_bar) x^{s-1}) / sqrt(gamma_bar)`.
pub fn decorrelate(x_t: &LatentBlock, gamma_bar: Real) -> Result<StateSequence> {
    inverse_dynamics(x_t.latents(), gamma_bar)
}

/// Inverse of [`decorrelate`]: rebuilds the correlated latents from the
/// independent coordinates.
pub fn recorrelate(y: &StateSequence, gamma_bar: Real, t: usize) -> Result<LatentBlock> {
    if y.start() != 1 {
        return Err(DyDiffError::NonContiguous(format!(
            "independent latents must cover 1..=S, got start {}",
            y.start()
        )));
    }
    LatentBlock::new(dynamics(y, gamma_bar)?, t)
}
