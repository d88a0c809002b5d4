//! The trainable reference denoiser `eps_theta(x_t^{1:S}, x_0^{-P:0}, t)`.
//!
//! Two small architectures are provided, selected by [`ArchSpec`]:
//!
//! - a residual MLP over the concatenation of the flattened noisy window, the
//!   flattened observations and a sinusoidal time embedding;
//! - a residual convolutional net for `[H, W]` grid frames, operating on the
//!   noisy states and observations stacked along the channel axis, with the
//!   time embedding injected as per-channel biases. Convolutions use circular
//!   padding to match the periodic synthetic grids.
//!
//! Everything is `f64`, forward and gradient evaluation are pure functions of
//! `(params, input)`, and the backward passes are hand-written and verified
//! against central finite differences in the test suites. Output heads are
//! zero-initialized so an untrained model predicts zero noise.

mod conv;
pub mod embed;
mod mlp;

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DyDiffError, Result};
use crate::forward::LatentBlock;
use crate::sequence::StateSequence;
use crate::Real;

pub use embed::time_embedding;

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Maps layer names to slices of the flat parameter vector; entries partition
/// the vector exactly, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    fn push(&mut self, name: &str, shape: &[usize]) {
        let len = shape.iter().product();
        self.entries.push(LayoutEntry {
            name: name.to_string(),
            offset: self.total,
            len,
            shape: shape.to_vec(),
        });
        self.total += len;
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn range_of(&self, name: &str) -> std::ops::Range<usize> {
        let e = self
            .entry(name)
            .unwrap_or_else(|| panic!("unknown layer {name}"));
        e.offset..e.offset + e.len
    }

    pub fn slice<'a>(&self, theta: &'a [Real], name: &str) -> &'a [Real] {
        &theta[self.range_of(name)]
    }

    pub fn slice_mut<'a>(&self, theta: &'a mut [Real], name: &str) -> &'a mut [Real] {
        &mut theta[self.range_of(name)]
    }

    /// Entries must tile `0..total` without gaps or overlap.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for e in &self.entries {
            if e.offset != cursor || e.len != e.shape.iter().product::<usize>() {
                return Err(DyDiffError::Checkpoint(format!(
                    "layout entry {} does not partition the vector",
                    e.name
                )));
            }
            cursor += e.len;
        }
        if cursor != self.total {
            return Err(DyDiffError::Checkpoint(
                "layout total disagrees with entries".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    theta: Vec<Real>,
    layout: Layout,
}

impl DenoiserParams {
    pub fn new(theta: Vec<Real>, layout: Layout) -> Result<Self> {
        layout.validate()?;
        if theta.len() != layout.total() {
            return Err(DyDiffError::Checkpoint(format!(
                "parameter vector has {} entries, layout expects {}",
                theta.len(),
                layout.total()
            )));
        }
        Ok(Self { theta, layout })
    }

    pub fn theta(&self) -> &[Real] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [Real] {
        &mut self.theta
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Model inputs: the noisy latents, the conditioning observations and the
/// diffusion timestep.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    pub noisy: LatentBlock,
    pub observations: StateSequence,
    pub t: usize,
}

/// Architecture selector; widths are desk scale by design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    /// Residual MLP: `hidden` units, `blocks` residual blocks.
    Mlp { hidden: usize, blocks: usize },
    /// Residual conv net for `[H, W]` frames: `channels` feature maps,
    /// `blocks` residual blocks, 3x3 circular kernels.
    Conv { channels: usize, blocks: usize },
}

/// Static model configuration; `(P, S, frame_shape)` must match the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub p: usize,
    pub s: usize,
    pub frame_shape: Vec<usize>,
    pub time_embed_dim: usize,
    pub arch: ArchSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(DyDiffError::InvalidInput("S must be at least 1".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(DyDiffError::InvalidInput(
                "time_embed_dim must be even and >= 2".into(),
            ));
        }
        match self.arch {
            ArchSpec::Mlp { hidden, blocks: _ } => {
                if hidden == 0 {
                    return Err(DyDiffError::InvalidInput("hidden must be positive".into()));
                }
            }
            ArchSpec::Conv { channels, .. } => {
                if channels == 0 {
                    return Err(DyDiffError::InvalidInput(
                        "channels must be positive".into(),
                    ));
                }
                if self.frame_shape.len() != 2 {
                    return Err(DyDiffError::InvalidInput(format!(
                        "conv architecture needs [H, W] frames, got {:?}",
                        self.frame_shape
                    )));
                }
                if self.frame_shape.iter().any(|&d| d < 3) {
                    return Err(DyDiffError::InvalidInput(
                        "conv architecture needs spatial dims >= 3".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }
}

/// Anything that predicts the correlated noise from `(x_t, observations, t)`;
/// implemented by the reference model and by test oracles.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        noisy: &LatentBlock,
        observations: &StateSequence,
        t: usize,
    ) -> Result<StateSequence>;
}

/// The reference denoiser; stateless apart from its configuration, parameters
/// are passed explicitly.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
}

impl Denoiser {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        match self.config.arch {
            ArchSpec::Mlp { .. } => mlp::layout(&self.config),
            ArchSpec::Conv { .. } => conv::layout(&self.config),
        }
    }

    /// Fan-in scaled Gaussian init with a zero output head, so the initial
    /// prediction is the zero sequence.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> DenoiserParams {
        let layout = self.layout();
        let mut theta = vec![0.0; layout.total()];
        match self.config.arch {
            ArchSpec::Mlp { .. } => mlp::init(&self.config, &layout, &mut theta, rng),
            ArchSpec::Conv { .. } => conv::init(&self.config, &layout, &mut theta, rng),
        }
        DenoiserParams::new(theta, layout).expect("layout built alongside theta")
    }

    fn check_input(&self, noisy: &LatentBlock, observations: &StateSequence) -> Result<()> {
        let cfg = &self.config;
        if noisy.s() != cfg.s || noisy.latents().frame_shape() != cfg.frame_shape {
            return Err(DyDiffError::ShapeMismatch {
                expected: cfg.frame_shape.clone(),
                got: noisy.latents().frame_shape().to_vec(),
            });
        }
        if observations.start() != -(cfg.p as i64)
            || observations.end() != 0
            || observations.frame_shape() != cfg.frame_shape
        {
            return Err(DyDiffError::ShapeMismatch {
                expected: cfg.frame_shape.clone(),
                got: observations.frame_shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        if params.len() != self.layout().total() {
            return Err(DyDiffError::Checkpoint(format!(
                "params have {} entries, model expects {}",
                params.len(),
                self.layout().total()
            )));
        }
        Ok(())
    }

    /// Predicts the correlated noise `eps_tilde^{1:S}`; deterministic given
    /// `(params, input)`.
    pub fn predict_noise(
        &self,
        params: &DenoiserParams,
        input: &DenoiserInput,
    ) -> Result<StateSequence> {
        self.check_params(params)?;
        self.check_input(&input.noisy, &input.observations)?;
        let out = match self.config.arch {
            ArchSpec::Mlp { .. } => {
                mlp::forward(&self.config, &params.layout, &params.theta, input)
                    .map(|(out, _)| out)
            }
            ArchSpec::Conv { .. } => {
                conv::forward(&self.config, &params.layout, &params.theta, input)
                    .map(|(out, _)| out)
            }
        }
        .map_err(|layer| DyDiffError::NumericFailure {
            layer,
            batch_index: None,
        })?;
        StateSequence::from_flat(1, &self.config.frame_shape, out)
    }

    /// Mean squared error over every element of the batch and its gradient
    /// with respect to the flat parameter vector.
    pub fn loss_and_gradient(
        &self,
        params: &DenoiserParams,
        batch: &[(DenoiserInput, StateSequence)],
    ) -> Result<(Real, Vec<Real>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(DyDiffError::InvalidInput("batch must be nonempty".into()));
        }
        let out_dim = self.config.s * self.config.frame_len();
        let total = (batch.len() * out_dim) as Real;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (idx, (input, target)) in batch.iter().enumerate() {
            self.check_input(&input.noisy, &input.observations)?;
            if target.start() != 1
                || target.num_frames() != self.config.s
                || target.frame_shape() != self.config.frame_shape
            {
                return Err(DyDiffError::ShapeMismatch {
                    expected: self.config.frame_shape.clone(),
                    got: target.frame_shape().to_vec(),
                });
            }
            let fail = |layer: String| DyDiffError::NumericFailure {
                layer,
                batch_index: Some(idx),
            };
            match self.config.arch {
                ArchSpec::Mlp { .. } => {
                    let (out, cache) =
                        mlp::forward(&self.config, &params.layout, &params.theta, input)
                            .map_err(fail)?;
                    let gout = residual_grad(&out, target.as_slice(), total, &mut loss);
                    mlp::backward(
                        &self.config,
                        &params.layout,
                        &params.theta,
                        &cache,
                        &gout,
                        &mut grad,
                    );
                }
                ArchSpec::Conv { .. } => {
                    let (out, cache) =
                        conv::forward(&self.config, &params.layout, &params.theta, input)
                            .map_err(fail)?;
                    let gout = residual_grad(&out, target.as_slice(), total, &mut loss);
                    conv::backward(
                        &self.config,
                        &params.layout,
                        &params.theta,
                        &cache,
                        &gout,
                        &mut grad,
                    );
                }
            }
            if !loss.is_finite() {
                return Err(DyDiffError::NumericFailure {
                    layer: "loss".into(),
                    batch_index: Some(idx),
                });
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DyDiffError::NumericFailure {
                layer: "gradient".into(),
                batch_index: None,
            });
        }
        Ok((loss, grad))
    }
}

/// Accumulates the squared-error loss and returns `dL/d out`.
fn residual_grad(out: &[Real], target: &[Real], total: Real, loss: &mut Real) -> Vec<Real> {
    out.iter()
        .zip(target)
        .map(|(&o, &t)| {
            let r = o - t;
            *loss += r * r / total;
            2.0 * r / total
        })
        .collect()
}

/// Assembles the per-sample input vector for the MLP path: flattened noisy
/// window, flattened observations, then the time embedding.
pub(crate) fn assemble_mlp_input(config: &ModelConfig, input: &DenoiserInput) -> Vec<Real> {
    let mut x = Vec::with_capacity(
        (config.s + config.p + 1) * config.frame_len() + config.time_embed_dim,
    );
    x.extend_from_slice(input.noisy.latents().as_slice());
    x.extend_from_slice(input.observations.as_slice());
    x.extend_from_slice(&embed::time_embedding(input.t, config.time_embed_dim));
    x
}

impl NoisePredictor for (&Denoiser, &DenoiserParams) {
    fn predict_noise(
        &self,
        noisy: &LatentBlock,
        observations: &StateSequence,
        t: usize,
    ) -> Result<StateSequence> {
        let input = DenoiserInput {
            noisy: noisy.clone(),
            observations: observations.clone(),
            t,
        };
        self.0.predict_noise(self.1, &input)
    }
}

/// Central-difference gradient of the batch loss; verification utility for
/// the hand-written backward passes (use tiny models, it is O(P) forwards).
pub fn central_difference_gradient(
    model: &Denoiser,
    params: &DenoiserParams,
    batch: &[(DenoiserInput, StateSequence)],
    step: Real,
) -> Result<Vec<Real>> {
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = probe.theta()[i];
        probe.theta_mut()[i] = orig + step;
        let (lp, _) = loss_only(model, &probe, batch)?;
        probe.theta_mut()[i] = orig - step;
        let (lm, _) = loss_only(model, &probe, batch)?;
        probe.theta_mut()[i] = orig;
        grad[i] = (lp - lm) / (2.0 * step);
    }
    Ok(grad)
}

fn loss_only(
    model: &Denoiser,
    params: &DenoiserParams,
    batch: &[(DenoiserInput, StateSequence)],
) -> Result<(Real, ())> {
    let out_dim = model.config.s * model.config.frame_len();
    let total = (batch.len() * out_dim) as Real;
    let mut loss = 0.0;
    for (input, target) in batch {
        let pred = model.predict_noise(params, input)?;
        for (&o, &t) in pred.as_slice().iter().zip(target.as_slice()) {
            let r = o - t;
            loss += r * r / total;
        }
    }
    Ok((loss, ()))
}

/// Borrows two disjoint layout ranges of the gradient vector mutably
/// (`a` must precede `b`).
pub(crate) fn two_slices(
    grad: &mut [Real],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [Real], &mut [Real]) {
    assert!(a.end <= b.start);
    let b_len = b.end - b.start;
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a], &mut right[..b_len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngFactory;

    fn mlp_config(p: usize, s: usize, frame: &[usize], hidden: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            p,
            s,
            frame_shape: frame.to_vec(),
            time_embed_dim: 4,
            arch: ArchSpec::Mlp { hidden, blocks },
        }
    }

    fn conv_config(p: usize, s: usize, hw: [usize; 2], channels: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            p,
            s,
            frame_shape: hw.to_vec(),
            time_embed_dim: 4,
            arch: ArchSpec::Conv { channels, blocks },
        }
    }

    fn random_input(config: &ModelConfig, seed: u64) -> DenoiserInput {
        let f = RngFactory::new(seed);
        let noisy = crate::rng::standard_normal_seq(
            &mut f.stream(&[0]),
            1,
            config.s as i64,
            &config.frame_shape,
        );
        let observations = crate::rng::standard_normal_seq(
            &mut f.stream(&[1]),
            -(config.p as i64),
            0,
            &config.frame_shape,
        );
        DenoiserInput {
            noisy: crate::forward::LatentBlock::new(noisy, 3).unwrap(),
            observations,
            t: 3,
        }
    }

    fn random_target(config: &ModelConfig, seed: u64) -> crate::StateSequence {
        crate::rng::standard_normal_seq(
            &mut RngFactory::new(seed).stream(&[2]),
            1,
            config.s as i64,
            &config.frame_shape,
        )
    }

    #[test]
    fn zero_head_means_zero_prediction() {
        for config in [mlp_config(1, 2, &[3], 8, 1), conv_config(1, 2, [4, 4], 4, 1)] {
            let model = Denoiser::new(config.clone()).unwrap();
            let params = model.init_params(&mut RngFactory::new(1).stream(&[0]));
            let out = model
                .predict_noise(&params, &random_input(&config, 5))
                .unwrap();
            assert!(out.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_and_sensitive_to_observations() {
        for config in [mlp_config(1, 2, &[3], 8, 1), conv_config(1, 2, [4, 4], 4, 1)] {
            let model = Denoiser::new(config.clone()).unwrap();
            let mut params = model.init_params(&mut RngFactory::new(2).stream(&[0]));
            // Give the head nonzero weights so conditioning reaches the output.
            let head = if params.layout().entry("head.kernel").is_some() {
                params.layout().range_of("head.kernel")
            } else {
                params.layout().range_of("head.weight")
            };
            let mut w = RngFactory::new(3).stream(&[0]);
            use rand::Rng;
            for v in &mut params.theta_mut()[head] {
                *v = 0.1 * w.gen_range(-1.0..1.0);
            }

            let input = random_input(&config, 7);
            let a = model.predict_noise(&params, &input).unwrap();
            let b = model.predict_noise(&params, &input).unwrap();
            assert_eq!(a.as_slice(), b.as_slice(), "bitwise determinism");

            let mut perturbed = input.clone();
            perturbed.observations.frame_mut(0)[0] += 0.37;
            let c = model.predict_noise(&params, &perturbed).unwrap();
            let delta = a
                .as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(delta > 0.0, "conditioning must be live");
        }
    }

    /// Straight-line re-implementation of the MLP forward pass, reading the
    /// same layout but built independently of the library code path.
    fn mlp_oracle(model: &Denoiser, params: &DenoiserParams, input: &DenoiserInput) -> Vec<Real> {
        let cfg = model.config();
        let (hidden, blocks) = match cfg.arch {
            ArchSpec::Mlp { hidden, blocks } => (hidden, blocks),
            _ => unreachable!(),
        };
        let mut x: Vec<Real> = Vec::new();
        x.extend_from_slice(input.noisy.latents().as_slice());
        x.extend_from_slice(input.observations.as_slice());
        x.extend_from_slice(&embed::time_embedding(input.t, cfg.time_embed_dim));

        let lay = params.layout();
        let th = params.theta();
        let matvec = |w: &[Real], b: &[Real], x: &[Real]| -> Vec<Real> {
            let cols = x.len();
            (0..b.len())
                .map(|r| {
                    b[r] + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<Real>()
                })
                .collect()
        };
        let mut h: Vec<Real> = matvec(lay.slice(th, "stem.weight"), lay.slice(th, "stem.bias"), &x)
            .into_iter()
            .map(Real::tanh)
            .collect();
        for k in 0..blocks {
            let u: Vec<Real> = matvec(
                lay.slice(th, &format!("block{k}.w1")),
                lay.slice(th, &format!("block{k}.b1")),
                &h,
            )
            .into_iter()
            .map(Real::tanh)
            .collect();
            let delta = matvec(
                lay.slice(th, &format!("block{k}.w2")),
                lay.slice(th, &format!("block{k}.b2")),
                &u,
            );
            h = (0..hidden).map(|i| h[i] + delta[i]).collect();
        }
        matvec(lay.slice(th, "head.weight"), lay.slice(th, "head.bias"), &h)
    }

    #[test]
    fn mlp_forward_matches_straight_line_oracle() {
        let config = mlp_config(2, 3, &[2], 6, 2);
        let model = Denoiser::new(config.clone()).unwrap();
        let mut params = model.init_params(&mut RngFactory::new(9).stream(&[0]));
        // Randomize everything, head included.
        use rand::Rng;
        let mut rng = RngFactory::new(10).stream(&[0]);
        for v in params.theta_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let input = random_input(&config, 11);
        let got = model.predict_noise(&params, &input).unwrap();
        let want = mlp_oracle(&model, &params, &input);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn conv_center_tap_is_identity_map() {
        // A head kernel with only the center tap set copies that feature map.
        let config = conv_config(0, 1, [4, 5], 2, 0);
        let model = Denoiser::new(config.clone()).unwrap();
        let mut params = model.init_params(&mut RngFactory::new(1).stream(&[0]));

        // Zero the stem so features are tanh(base) = tanh(bias + temb . emb),
        // constant per channel; then head picks channel 0's center tap.
        let lay = params.layout().clone();
        for v in params.theta_mut()[lay.range_of("stem.kernel")].iter_mut() {
            *v = 0.0;
        }
        for v in params.theta_mut()[lay.range_of("stem.temb")].iter_mut() {
            *v = 0.0;
        }
        params.theta_mut()[lay.range_of("stem.bias")][0] = 0.3;
        let head = lay.range_of("head.kernel");
        params.theta_mut()[head.start + 4] = 2.0; // center tap of (out 0, in 0)

        let input = random_input(&config, 2);
        let out = model.predict_noise(&params, &input).unwrap();
        let want = 2.0 * 0.3f64.tanh();
        for &v in out.as_slice() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_zero_at_perfect_prediction_and_quadratic() {
        let config = mlp_config(0, 1, &[2], 5, 1);
        let model = Denoiser::new(config.clone()).unwrap();
        let params = model.init_params(&mut RngFactory::new(4).stream(&[0]));

        // Zero head predicts zero; zero target makes the loss exactly zero,
        // with an all-zero gradient.
        let input = random_input(&config, 6);
        let zero_target = crate::StateSequence::zeros(1, 1, &[2]).unwrap();
        let (loss, grad) = model
            .loss_and_gradient(&params, &[(input.clone(), zero_target)])
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));

        // Doubling every residual quadruples the loss.
        let target = random_target(&config, 8);
        let double = target.map(|v| 2.0 * v);
        let (l1, _) = model
            .loss_and_gradient(&params, &[(input.clone(), target)])
            .unwrap();
        let (l4, _) = model.loss_and_gradient(&params, &[(input, double)]).unwrap();
        assert!((l4 - 4.0 * l1).abs() < 1e-12 * l4.max(1.0));
    }

    fn check_gradients(config: ModelConfig, seed: u64) {
        let model = Denoiser::new(config.clone()).unwrap();
        let mut params = model.init_params(&mut RngFactory::new(seed).stream(&[0]));
        use rand::Rng;
        let mut rng = RngFactory::new(seed).stream(&[1]);
        for v in params.theta_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
        assert!(params.len() <= 500, "gradient check wants tiny models");
        let batch: Vec<_> = (0..2)
            .map(|i| {
                (
                    random_input(&config, seed * 100 + i),
                    random_target(&config, seed * 200 + i),
                )
            })
            .collect();
        let (_, analytic) = model.loss_and_gradient(&params, &batch).unwrap();
        let numeric = central_difference_gradient(&model, &params, &batch, 1e-5).unwrap();
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn mlp_gradients_match_central_differences() {
        check_gradients(mlp_config(1, 2, &[2], 6, 1), 13);
        check_gradients(mlp_config(0, 1, &[1], 8, 2), 14);
    }

    #[test]
    fn conv_gradients_match_central_differences() {
        check_gradients(conv_config(0, 1, [3, 3], 2, 1), 15);
        check_gradients(conv_config(1, 1, [4, 3], 2, 0), 16);
    }

    #[test]
    fn numeric_failures_carry_layer_and_batch_index() {
        let config = mlp_config(0, 1, &[1], 4, 1);
        let model = Denoiser::new(config.clone()).unwrap();
        let mut params = model.init_params(&mut RngFactory::new(1).stream(&[0]));
        // Corrupt the post-tanh linear of the block: tanh would saturate an
        // infinite pre-activation back to a finite value.
        let range = params.layout().range_of("block0.w2");
        for v in params.theta_mut()[range].iter_mut() {
            *v = f64::INFINITY;
        }

        let input = random_input(&config, 3);
        let err = model.predict_noise(&params, &input).unwrap_err();
        match err {
            crate::DyDiffError::NumericFailure { layer, .. } => {
                assert_eq!(layer, "block0");
            }
            other => panic!("unexpected error {other:?}"),
        }

        let target = random_target(&config, 4);
        let err = model
            .loss_and_gradient(&params, &[(input, target)])
            .unwrap_err();
        match err {
            crate::DyDiffError::NumericFailure { batch_index, .. } => {
                assert_eq!(batch_index, Some(0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let config = mlp_config(1, 2, &[2], 4, 0);
        let model = Denoiser::new(config.clone()).unwrap();
        let params = model.init_params(&mut RngFactory::new(1).stream(&[0]));
        let other = mlp_config(1, 3, &[2], 4, 0);
        let input = random_input(&other, 1);
        assert!(model.predict_noise(&params, &input).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let config = mlp_config(1, 2, &[3], 5, 1);
        let model = Denoiser::new(config).unwrap();
        let mut rng = RngFactory::new(77).stream(&[0]);
        let params = model.init_params(&mut rng);

        let dir = std::env::temp_dir().join(format!("dydiff-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bin = dir.join("params.bin");
        let lay = dir.join("params.layout");
        checkpoint::save_params(&params, &bin, &lay).unwrap();
        let loaded = checkpoint::load_params(&bin, &lay).unwrap();
        assert_eq!(loaded, params);

        // Truncated binary must be rejected.
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(checkpoint::load_params(&bin, &lay).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
