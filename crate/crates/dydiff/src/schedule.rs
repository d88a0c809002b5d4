//! Noise and dynamics schedules.
//!
//! A [`Schedule`] holds the cumulative signal coefficients `alpha_bar`, the
//! per-step ratios `alpha`, the dynamics coefficients `gamma_bar` with ratios
//! `gamma`, the mixing factor `eta` and the sampler variances `sigma`.
//! Timestep arrays are 1-based in the math; index 0 carries the identities
//! `alpha_bar[0] = gamma_bar[0] = 1`, which makes the `t = 0` boundary of the
//! forward process exact.
//!
//! The default dynamics rule is `gamma_bar_t = eta * alpha_bar_t + (1 - eta)`,
//! so `eta = 0` recovers a standard diffusion schedule (`gamma_bar == 1`).
//! The noise magnitude is always `sqrt(1 - alpha_bar_t)`, independent of
//! `gamma_bar`, so the signal-to-noise ratio matches standard diffusion.

use serde::{Deserialize, Serialize};

use crate::error::{DyDiffError, Result};
use crate::{Real, Scalar};

/// Supported `alpha_bar` families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaBarFamily<F = Real> {
    /// Betas linearly spaced in `[beta_start, beta_end]`, `alpha_bar` their
    /// running product of `1 - beta`.
    LinearBeta { beta_start: F, beta_end: F },
    /// Squared-cosine `alpha_bar` with the usual small offset; betas are
    /// clipped at 0.999 to keep `alpha_bar` strictly positive.
    Cosine { offset: F },
}

impl<F: Scalar> AlphaBarFamily<F> {
    pub fn default_linear() -> Self {
        Self::LinearBeta {
            beta_start: F::from_f64(1e-4).unwrap(),
            beta_end: F::from_f64(0.02).unwrap(),
        }
    }

    pub fn default_cosine() -> Self {
        Self::Cosine {
            offset: F::from_f64(0.008).unwrap(),
        }
    }
}

/// Sampler variance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaSpec {
    /// `sigma_t = 0`: deterministic DDIM-like sampling.
    Deterministic,
    /// `sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * (1 - alpha_t)`,
    /// the DDPM posterior variance.
    DdpmPosterior,
}

/// How the `gamma` tables were constructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaRule<F = Real> {
    /// `gamma_bar_t = eta * alpha_bar_t + (1 - eta)`.
    EtaMix { eta: F },
    /// Per-step `1 - gamma_t = shrink * (1 - alpha_t)`, cumulative product
    /// for `gamma_bar` (the S=1 time-series variant).
    TimeGrad { shrink: F },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<F = Real> {
    t_max: usize,
    alpha_bar: Vec<F>,
    alpha: Vec<F>,
    gamma_bar: Vec<F>,
    gamma: Vec<F>,
    eta: F,
    sigma: Vec<F>,
    gamma_rule: GammaRule<F>,
    sigma_spec: SigmaSpec,
}

/// Builds a schedule with the default dynamics rule
/// `gamma_bar_t = eta * alpha_bar_t + (1 - eta)`.
pub fn build_schedule<F: Scalar>(
    t_max: usize,
    family: AlphaBarFamily<F>,
    eta: F,
    sigma_spec: SigmaSpec,
) -> Result<Schedule<F>> {
    let eta_f = eta.to_f64().unwrap_or(f64::NAN);
    if !(0.0..=1.0).contains(&eta_f) {
        return Err(DyDiffError::InvalidSchedule(format!(
            "eta must lie in [0, 1], got {eta_f}"
        )));
    }
    let alpha_bar = build_alpha_bar(t_max, family)?;
    let one = F::one();
    let gamma_bar: Vec<F> = alpha_bar.iter().map(|&ab| eta * ab + (one - eta)).collect();
    Schedule::assemble(alpha_bar, gamma_bar, eta, GammaRule::EtaMix { eta }, sigma_spec)
}

/// Builds a schedule whose dynamics rule is the per-step
/// `1 - gamma_t = shrink * (1 - alpha_t)` variant (defaults to `shrink = 0.3`).
pub fn build_schedule_timegrad<F: Scalar>(
    t_max: usize,
    family: AlphaBarFamily<F>,
    shrink: F,
    sigma_spec: SigmaSpec,
) -> Result<Schedule<F>> {
    let s = shrink.to_f64().unwrap_or(f64::NAN);
    if !(0.0..=1.0).contains(&s) {
        return Err(DyDiffError::InvalidSchedule(format!(
            "shrink must lie in [0, 1], got {s}"
        )));
    }
    let alpha_bar = build_alpha_bar(t_max, family)?;
    let alpha = ratios(&alpha_bar);
    let (_, gamma_bar) = gamma_variant_timegrad(&alpha, shrink)?;
    Schedule::assemble(
        alpha_bar,
        gamma_bar,
        shrink,
        GammaRule::TimeGrad { shrink },
        sigma_spec,
    )
}

/// Per-step `gamma_t = 1 - shrink * (1 - alpha_t)` and the cumulative
/// `gamma_bar` (length `T + 1`, leading 1).
pub fn gamma_variant_timegrad<F: Scalar>(alpha: &[F], shrink: F) -> Result<(Vec<F>, Vec<F>)> {
    let one = F::one();
    let mut gamma = Vec::with_capacity(alpha.len());
    for (i, &a) in alpha.iter().enumerate() {
        let af = a.to_f64().unwrap_or(f64::NAN);
        if !(af > 0.0 && af <= 1.0) {
            return Err(DyDiffError::InvalidSchedule(format!(
                "alpha[{i}] = {af} outside (0, 1]"
            )));
        }
        gamma.push(one - shrink * (one - a));
    }
    let mut gamma_bar = Vec::with_capacity(alpha.len() + 1);
    gamma_bar.push(one);
    let mut acc = one;
    for &g in &gamma {
        acc = acc * g;
        gamma_bar.push(acc);
    }
    Ok((gamma, gamma_bar))
}

fn build_alpha_bar<F: Scalar>(t_max: usize, family: AlphaBarFamily<F>) -> Result<Vec<F>> {
    if t_max == 0 {
        return Err(DyDiffError::InvalidSchedule(
            "T must be at least 1".into(),
        ));
    }
    let one = F::one();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(one);
    match family {
        AlphaBarFamily::LinearBeta {
            beta_start,
            beta_end,
        } => {
            let (b0, b1) = (
                beta_start.to_f64().unwrap_or(f64::NAN),
                beta_end.to_f64().unwrap_or(f64::NAN),
            );
            if !(b0 > 0.0 && b1 < 1.0 && b0 <= b1) {
                return Err(DyDiffError::InvalidSchedule(format!(
                    "linear betas need 0 < beta_start <= beta_end < 1, got [{b0}, {b1}]"
                )));
            }
            let mut acc = one;
            for t in 1..=t_max {
                let frac = if t_max == 1 {
                    F::zero()
                } else {
                    F::from_usize(t - 1).unwrap() / F::from_usize(t_max - 1).unwrap()
                };
                let beta = beta_start + (beta_end - beta_start) * frac;
                acc = acc * (one - beta);
                alpha_bar.push(acc);
            }
        }
        AlphaBarFamily::Cosine { offset } => {
            let off = offset.to_f64().unwrap_or(f64::NAN);
            if !(off > 0.0) {
                return Err(DyDiffError::InvalidSchedule(format!(
                    "cosine offset must be positive, got {off}"
                )));
            }
            let half_pi = F::from_f64(std::f64::consts::FRAC_PI_2).unwrap();
            let f = |t: usize| {
                let u = F::from_usize(t).unwrap() / F::from_usize(t_max).unwrap();
                let c = ((u + offset) / (one + offset) * half_pi).cos();
                c * c
            };
            let beta_cap = F::from_f64(0.999).unwrap();
            let mut acc = one;
            for t in 1..=t_max {
                let beta = (one - f(t) / f(t - 1)).min(beta_cap);
                acc = acc * (one - beta);
                alpha_bar.push(acc);
            }
        }
    }
    for (t, &ab) in alpha_bar.iter().enumerate() {
        let v = ab.to_f64().unwrap_or(f64::NAN);
        if !(v > 0.0 && v <= 1.0) {
            return Err(DyDiffError::InvalidSchedule(format!(
                "alpha_bar[{t}] = {v} outside (0, 1]"
            )));
        }
    }
    Ok(alpha_bar)
}

/// Per-step ratios of a cumulative table: `r[t-1] = c[t] / c[t-1]`.
fn ratios<F: Scalar>(cumulative: &[F]) -> Vec<F> {
    cumulative
        .windows(2)
        .map(|w| w[1] / w[0])
        .collect()
}

impl<F: Scalar> Schedule<F> {
    fn assemble(
        alpha_bar: Vec<F>,
        gamma_bar: Vec<F>,
        eta: F,
        gamma_rule: GammaRule<F>,
        sigma_spec: SigmaSpec,
    ) -> Result<Self> {
        let t_max = alpha_bar.len() - 1;
        let alpha = ratios(&alpha_bar);
        let gamma = ratios(&gamma_bar);
        let sigma = (1..=t_max)
            .map(|t| sigma_between_tables(&alpha_bar, t, t - 1, sigma_spec))
            .collect();
        let schedule = Self {
            t_max,
            alpha_bar,
            alpha,
            gamma_bar,
            gamma,
            eta,
            sigma,
            gamma_rule,
            sigma_spec,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Checks every structural invariant of the tables. Construction already
    /// runs this; it is public so deserialized or hand-built tables can be
    /// vetted too.
    pub fn validate(&self) -> Result<()> {
        let t_max = self.t_max;
        let fail = |msg: String| Err(DyDiffError::InvalidSchedule(msg));
        if t_max == 0 {
            return fail("T must be at least 1".into());
        }
        if self.alpha_bar.len() != t_max + 1
            || self.gamma_bar.len() != t_max + 1
            || self.alpha.len() != t_max
            || self.gamma.len() != t_max
            || self.sigma.len() != t_max
        {
            return fail("table lengths inconsistent with T".into());
        }
        if self.alpha_bar[0] != F::one() || self.gamma_bar[0] != F::one() {
            return fail("alpha_bar[0] and gamma_bar[0] must be 1".into());
        }
        let eta = self.eta.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&eta) {
            return fail(format!("eta = {eta} outside [0, 1]"));
        }
        // 1e-12 for f64; widened proportionally for lower-precision scalars.
        let rel_tol = f64::max(1e-12, 16.0 * F::epsilon().to_f64().unwrap_or(0.0));
        for t in 1..=t_max {
            let ab = self.alpha_bar[t].to_f64().unwrap();
            let ab_prev = self.alpha_bar[t - 1].to_f64().unwrap();
            if !(ab > 0.0 && ab <= 1.0) {
                return fail(format!("alpha_bar[{t}] = {ab} outside (0, 1]"));
            }
            if ab >= ab_prev {
                return fail(format!("alpha_bar not strictly decreasing at t = {t}"));
            }
            let gb = self.gamma_bar[t].to_f64().unwrap();
            let gb_prev = self.gamma_bar[t - 1].to_f64().unwrap();
            if !(gb > 0.0 && gb <= 1.0) {
                return fail(format!("gamma_bar[{t}] = {gb} outside (0, 1]"));
            }
            if gb > gb_prev {
                return fail(format!("gamma_bar increases at t = {t}"));
            }
            let a = self.alpha[t - 1].to_f64().unwrap();
            if ((a * ab_prev - ab) / ab).abs() > rel_tol {
                return fail(format!("alpha[{t}] * alpha_bar[{}] != alpha_bar[{t}]", t - 1));
            }
            let g = self.gamma[t - 1].to_f64().unwrap();
            if ((g * gb_prev - gb) / gb).abs() > rel_tol {
                return fail(format!("gamma[{t}] * gamma_bar[{}] != gamma_bar[{t}]", t - 1));
            }
            let s = self.sigma[t - 1].to_f64().unwrap();
            if !(s >= 0.0) {
                return fail(format!("sigma[{t}] = {s} negative"));
            }
            // Required by the sqrt(1 - alpha_bar_{t-1} - sigma_t^2) coefficient.
            if s * s > (1.0 - ab_prev) * (1.0 + 1e-12) {
                return fail(format!("sigma[{t}]^2 exceeds 1 - alpha_bar[{}]", t - 1));
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn eta(&self) -> F {
        self.eta
    }

    pub fn gamma_rule(&self) -> GammaRule<F> {
        self.gamma_rule
    }

    pub fn sigma_spec(&self) -> SigmaSpec {
        self.sigma_spec
    }

    /// Cumulative signal coefficient, `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> F {
        self.alpha_bar[t]
    }

    /// Per-step ratio `alpha_bar[t] / alpha_bar[t-1]`, `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> F {
        self.alpha[t - 1]
    }

    /// Cumulative dynamics coefficient, `t` in `0..=T`.
    pub fn gamma_bar(&self, t: usize) -> F {
        self.gamma_bar[t]
    }

    /// Per-step ratio `gamma_bar[t] / gamma_bar[t-1]`, `t` in `1..=T`.
    pub fn gamma(&self, t: usize) -> F {
        self.gamma[t - 1]
    }

    /// Sampler standard deviation for the step `t -> t-1`, `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> F {
        self.sigma[t - 1]
    }

    /// Signal coefficient `sqrt(alpha_bar_t)` of the forward process.
    pub fn signal_coef(&self, t: usize) -> F {
        self.alpha_bar[t].sqrt()
    }

    /// Noise coefficient `sqrt(1 - alpha_bar_t)` of the forward process; this
    /// is the only quantity the forward process uses for the noise magnitude.
    pub fn noise_coef(&self, t: usize) -> F {
        (F::one() - self.alpha_bar[t]).sqrt()
    }

    /// Sampler standard deviation for an arbitrary jump `t_hi -> t_lo`
    /// (`t_lo < t_hi`); generalizes [`Schedule::sigma`] to strided sampling.
    pub fn sigma_between(&self, t_hi: usize, t_lo: usize) -> F {
        sigma_between_tables(&self.alpha_bar, t_hi, t_lo, self.sigma_spec)
    }

    /// The DDPM-consistent standard deviation for `t_hi -> t_lo` regardless
    /// of how this schedule's stored sigma table was built; used by samplers
    /// whose stochasticity is a runtime flag.
    pub fn ddpm_sigma_between(&self, t_hi: usize, t_lo: usize) -> F {
        sigma_between_tables(&self.alpha_bar, t_hi, t_lo, SigmaSpec::DdpmPosterior)
    }

    pub fn alpha_bar_table(&self) -> &[F] {
        &self.alpha_bar
    }

    pub fn gamma_bar_table(&self) -> &[F] {
        &self.gamma_bar
    }

    pub fn sigma_table(&self) -> &[F] {
        &self.sigma
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(DyDiffError::TimestepOutOfRange {
                t,
                t_max: self.t_max,
            });
        }
        Ok(())
    }
}

/// Serializable schedule description; enough to rebuild a [`Schedule`]
/// bit-identically from a config file or a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_max: usize,
    /// "linear-beta" or "cosine".
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_beta_start")]
    pub beta_start: Real,
    #[serde(default = "default_beta_end")]
    pub beta_end: Real,
    #[serde(default = "default_cosine_offset")]
    pub cosine_offset: Real,
    #[serde(default = "default_eta")]
    pub eta: Real,
    /// "deterministic" or "ddpm-posterior".
    #[serde(default = "default_sigma")]
    pub sigma: String,
    /// "eta-mix" or "timegrad".
    #[serde(default = "default_gamma_rule")]
    pub gamma_rule: String,
    #[serde(default = "default_shrink")]
    pub timegrad_shrink: Real,
}

fn default_family() -> String {
    "linear-beta".into()
}
fn default_beta_start() -> Real {
    1e-4
}
fn default_beta_end() -> Real {
    0.02
}
fn default_cosine_offset() -> Real {
    0.008
}
fn default_eta() -> Real {
    0.5
}
fn default_sigma() -> String {
    "deterministic".into()
}
fn default_gamma_rule() -> String {
    "eta-mix".into()
}
fn default_shrink() -> Real {
    0.3
}

impl ScheduleSpec {
    pub fn new(t_max: usize, eta: Real) -> Self {
        Self {
            t_max,
            family: default_family(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            cosine_offset: default_cosine_offset(),
            eta,
            sigma: default_sigma(),
            gamma_rule: default_gamma_rule(),
            timegrad_shrink: default_shrink(),
        }
    }

    pub fn build(&self) -> Result<Schedule<Real>> {
        let family = match self.family.as_str() {
            "linear-beta" => AlphaBarFamily::LinearBeta {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            "cosine" => AlphaBarFamily::Cosine {
                offset: self.cosine_offset,
            },
            other => {
                return Err(DyDiffError::InvalidSchedule(format!(
                    "unknown alpha_bar family '{other}' (expected linear-beta or cosine)"
                )))
            }
        };
        let sigma = match self.sigma.as_str() {
            "deterministic" => SigmaSpec::Deterministic,
            "ddpm-posterior" => SigmaSpec::DdpmPosterior,
            other => {
                return Err(DyDiffError::InvalidSchedule(format!(
                    "unknown sigma spec '{other}' (expected deterministic or ddpm-posterior)"
                )))
            }
        };
        match self.gamma_rule.as_str() {
            "eta-mix" => build_schedule(self.t_max, family, self.eta, sigma),
            "timegrad" => build_schedule_timegrad(self.t_max, family, self.timegrad_shrink, sigma),
            other => Err(DyDiffError::InvalidSchedule(format!(
                "unknown gamma rule '{other}' (expected eta-mix or timegrad)"
            ))),
        }
    }
}

fn sigma_between_tables<F: Scalar>(
    alpha_bar: &[F],
    t_hi: usize,
    t_lo: usize,
    spec: SigmaSpec,
) -> F {
    match spec {
        SigmaSpec::Deterministic => F::zero(),
        SigmaSpec::DdpmPosterior => {
            let one = F::one();
            let ab_hi = alpha_bar[t_hi];
            let ab_lo = alpha_bar[t_lo];
            let var = (one - ab_lo) / (one - ab_hi) * (one - ab_hi / ab_lo);
            var.max(F::zero()).sqrt()
        }
    }
}
