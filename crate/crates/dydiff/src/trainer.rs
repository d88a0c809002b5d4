//! Training loop for the DyDiff objective.
//!
//! Each step samples windows, draws a timestep `t ~ U[1, T]` per window,
//! corrupts the targets with correlated noise and regresses the denoiser on
//! `eps_dyn = Dynamics(eps^{1:S}, gamma_bar_t)`:
//!
//! ```text
//! input  = sqrt(ab_t) * Dynamics(x^{-P:S}, gb_t)[1:S] + sqrt(1 - ab_t) * eps_dyn
//! target = eps_dyn
//! ```
//!
//! The `independent_noise` ablation replaces `eps_dyn` with the raw `eps` on
//! both sides. The standard-diffusion path ([`TrainingPath::StandardDpm`])
//! builds the classic pairs instead and shares the RNG draw order, so the
//! eta = 0 reduction can be checked bitwise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::data::SequenceWindow;
use crate::denoiser::checkpoint::{load_params, save_params, write_atomic};
use crate::denoiser::{Denoiser, DenoiserInput, DenoiserParams};
use crate::dynamics::dynamics;
use crate::error::{DyDiffError, Result};
use crate::forward::{sample_correlated_noise, LatentBlock};
use crate::rng::RngFactory;
use crate::sequence::StateSequence;
use crate::{Real, Schedule};

/// Optimizer selection; Adam is the default, plain SGD is kept for gradient
/// hygiene checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerSpec {
    Sgd,
    Adam { beta1: Real, beta2: Real, eps: Real },
}

impl OptimizerSpec {
    pub fn adam_default() -> Self {
        OptimizerSpec::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; owns the moment buffers for Adam.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<Real>,
    v: Vec<Real>,
    count: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, param_len: usize) -> Self {
        let (m, v) = match spec {
            OptimizerSpec::Sgd => (Vec::new(), Vec::new()),
            OptimizerSpec::Adam { .. } => (vec![0.0; param_len], vec![0.0; param_len]),
        };
        Self {
            spec,
            m,
            v,
            count: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [Real], grad: &[Real], lr: Real) {
        match self.spec {
            OptimizerSpec::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                self.count += 1;
                let bc1 = 1.0 - beta1.powi(self.count as i32);
                let bc2 = 1.0 - beta2.powi(self.count as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Which forward corruption the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPath {
    /// The DyDiff pairs (Algorithm-style); `independent_noise` is the
    /// ablation that swaps the correlated noise for the raw i.i.d. draws.
    DyDiff { independent_noise: bool },
    /// Classic diffusion pairs, kept as the reduction oracle.
    StandardDpm,
}

/// Builds one training example. Draw order: `t ~ U[1, T]`, then the `1..=S`
/// noise block, identical across paths so eta = 0 comparisons share streams.
pub fn training_example<R: Rng + ?Sized>(
    path: TrainingPath,
    window: &SequenceWindow,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<(DenoiserInput, StateSequence)> {
    match path {
        TrainingPath::StandardDpm => baseline::std_training_example(window, schedule, rng),
        TrainingPath::DyDiff { independent_noise } => {
            let t = rng.gen_range(1..=schedule.t_max());
            let gamma_bar = schedule.gamma_bar(t);
            let noise =
                sample_correlated_noise(window.s(), window.frame_shape(), gamma_bar, rng)?;
            let eps_used = if independent_noise {
                noise.eps()
            } else {
                noise.eps_tilde()
            };
            let x_dyn = dynamics(&window.full(), gamma_bar)?.slice(1, window.s() as i64)?;
            let latents =
                x_dyn.affine(schedule.signal_coef(t), eps_used, schedule.noise_coef(t))?;
            Ok((
                DenoiserInput {
                    noisy: LatentBlock::new(latents, t)?,
                    observations: window.observations().clone(),
                    t,
                },
                eps_used.clone(),
            ))
        }
    }
}

/// One optimizer update on the mean loss over `batch`. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &Denoiser,
    params: &mut DenoiserParams,
    opt: &mut Optimizer,
    schedule: &Schedule,
    batch: &[SequenceWindow],
    lr: Real,
    path: TrainingPath,
    rng: &mut R,
) -> Result<Real> {
    if batch.is_empty() {
        return Err(DyDiffError::InvalidInput("batch must be nonempty".into()));
    }
    let mut examples = Vec::with_capacity(batch.len());
    for window in batch {
        examples.push(training_example(path, window, schedule, rng)?);
    }
    let (loss, grad) = model.loss_and_gradient(params, &examples)?;
    if !loss.is_finite() {
        return Err(DyDiffError::NumericFailure {
            layer: "loss".into(),
            batch_index: None,
        });
    }
    opt.apply(params.theta_mut(), &grad, lr);
    Ok(loss)
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub independent_noise: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive");
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be positive");
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DyDiffError::InvalidInput(problems.join("; ")))
        }
    }
}

/// Everything a finished (or resumed) run hands back.
#[derive(Debug)]
pub struct TrainOutput {
    pub params: DenoiserParams,
    /// `(step, training loss)` per step, 1-based step indices.
    pub loss_curve: Vec<(usize, Real)>,
    /// `(step, eval loss)` every `eval_every` steps.
    pub eval_curve: Vec<(usize, Real)>,
    pub checkpoint_dirs: Vec<PathBuf>,
    pub manifest_path: Option<PathBuf>,
}

/// Run manifest: everything needed to re-derive the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// "dydiff", or "dpm" when eta = 0 (the standard-diffusion reduction).
    pub label: String,
    pub seed: u64,
    pub steps_completed: usize,
    pub dataset_fingerprint: String,
    pub train: TrainConfig,
    pub schedule: crate::schedule::ScheduleSpec,
    pub model: crate::denoiser::ModelConfig,
    pub loss_csv: String,
    pub eval_csv: String,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    /// Schedule tables echoed as plain decimal arrays for audits.
    pub alpha_bar: Vec<Real>,
    pub gamma_bar: Vec<Real>,
    pub sigma: Vec<Real>,
}

const STREAM_INIT: u64 = 0x494e_4954;
const STREAM_STEP: u64 = 0x53544550;
const STREAM_EVAL: u64 = 0x4556414c;

/// Runs `config.steps` training steps over `windows`.
///
/// Fully reproducible from `(config.seed, dataset fingerprint)`: parameter
/// init and every step draw from tagged substreams of the seed, so a resumed
/// run retraces exactly the steps a straight run would have taken. When
/// `out_dir` is set, writes `loss.csv`, `eval.csv`, periodic checkpoints
/// under `checkpoints/step_NNNNNN/` and a final `manifest.toml`.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &Denoiser,
    schedule: &Schedule,
    schedule_spec: &crate::schedule::ScheduleSpec,
    windows: &[SequenceWindow],
    config: &TrainConfig,
    dataset_fingerprint: &str,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if windows.is_empty() {
        return Err(DyDiffError::Dataset("no training windows".into()));
    }
    let factory = RngFactory::new(config.seed);
    let path = TrainingPath::DyDiff {
        independent_noise: config.independent_noise,
    };

    let (mut params, mut opt, start_step, mut loss_curve, mut eval_curve) = match resume_from {
        None => {
            let params = model.init_params(&mut factory.stream(&[STREAM_INIT]));
            let opt = Optimizer::new(config.optimizer, params.len());
            (params, opt, 0usize, Vec::new(), Vec::new())
        }
        Some(ckpt_dir) => {
            let params = load_params(
                &ckpt_dir.join("params.bin"),
                &ckpt_dir.join("params.layout"),
            )?;
            let (opt, step) = load_optimizer(&ckpt_dir.join("opt.bin"), config.optimizer)?;
            let (loss_curve, eval_curve) = match out_dir {
                Some(dir) => (
                    read_curve(&dir.join("loss.csv"), step)?,
                    read_curve(&dir.join("eval.csv"), step)?,
                ),
                None => (Vec::new(), Vec::new()),
            };
            (params, opt, step, loss_curve, eval_curve)
        }
    };
    if params.len() != model.layout().total() {
        return Err(DyDiffError::Checkpoint(
            "checkpoint does not match the model configuration".into(),
        ));
    }

    let mut checkpoint_dirs = Vec::new();
    for step in start_step..config.steps {
        let mut rng = factory.stream(&[STREAM_STEP, step as u64]);
        let batch: Vec<SequenceWindow> = (0..config.batch_size)
            .map(|_| windows[rng.gen_range(0..windows.len())].clone())
            .collect();
        let loss = train_step(
            model,
            &mut params,
            &mut opt,
            schedule,
            &batch,
            config.learning_rate,
            path,
            &mut rng,
        )?;
        let step1 = step + 1;
        loss_curve.push((step1, loss));

        if step1 % config.eval_every == 0 || step1 == config.steps {
            let mut eval_rng = factory.stream(&[STREAM_EVAL, step1 as u64]);
            let n_eval = config.batch_size.min(windows.len());
            let mut examples = Vec::with_capacity(n_eval);
            for i in 0..n_eval {
                examples.push(training_example(
                    path,
                    &windows[i],
                    schedule,
                    &mut eval_rng,
                )?);
            }
            let (eval_loss, _) = model.loss_and_gradient(&params, &examples)?;
            eval_curve.push((step1, eval_loss));
        }

        if let Some(dir) = out_dir {
            if step1 % config.checkpoint_every == 0 || step1 == config.steps {
                let ckpt = dir.join(format!("checkpoints/step_{step1:06}"));
                fs::create_dir_all(&ckpt)?;
                save_params(&params, &ckpt.join("params.bin"), &ckpt.join("params.layout"))?;
                save_optimizer(&opt, step1, &ckpt.join("opt.bin"))?;
                checkpoint_dirs.push(ckpt);
            }
        }
    }

    // steps == 0: still emit the initial state as the final checkpoint.
    if let Some(dir) = out_dir {
        if checkpoint_dirs.is_empty() {
            let ckpt = dir.join(format!("checkpoints/step_{:06}", config.steps));
            fs::create_dir_all(&ckpt)?;
            save_params(&params, &ckpt.join("params.bin"), &ckpt.join("params.layout"))?;
            save_optimizer(&opt, config.steps, &ckpt.join("opt.bin"))?;
            checkpoint_dirs.push(ckpt);
        }
    }

    let manifest_path = match out_dir {
        Some(dir) => {
            write_curve(&dir.join("loss.csv"), "step,loss", &loss_curve)?;
            write_curve(&dir.join("eval.csv"), "step,eval_loss", &eval_curve)?;
            let manifest = RunManifest {
                version: 1,
                label: if schedule.eta() == 0.0 { "dpm" } else { "dydiff" }.into(),
                seed: config.seed,
                steps_completed: config.steps,
                dataset_fingerprint: dataset_fingerprint.to_string(),
                train: config.clone(),
                schedule: schedule_spec.clone(),
                model: model.config().clone(),
                loss_csv: "loss.csv".into(),
                eval_csv: "eval.csv".into(),
                checkpoints: checkpoint_dirs
                    .iter()
                    .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
                    .collect(),
                final_checkpoint: checkpoint_dirs
                    .last()
                    .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
                    .unwrap_or_default(),
                alpha_bar: schedule.alpha_bar_table().to_vec(),
                gamma_bar: schedule.gamma_bar_table().to_vec(),
                sigma: schedule.sigma_table().to_vec(),
            };
            let text = toml::to_string_pretty(&manifest)
                .map_err(|e| DyDiffError::InvalidInput(e.to_string()))?;
            let path = dir.join("manifest.toml");
            write_atomic(&path, text.as_bytes())?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainOutput {
        params,
        loss_curve,
        eval_curve,
        checkpoint_dirs,
        manifest_path,
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(run_dir.join("manifest.toml"))?;
    toml::from_str(&text).map_err(|e| DyDiffError::InvalidInput(format!("bad manifest: {e}")))
}

fn write_curve(path: &Path, header: &str, curve: &[(usize, Real)]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for (step, v) in curve {
        text.push_str(&format!("{step},{v:.17e}\n"));
    }
    write_atomic(path, text.as_bytes())
}

fn read_curve(path: &Path, up_to_step: usize) -> Result<Vec<(usize, Real)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| DyDiffError::InvalidInput(format!("bad curve line: {line}")))?;
        let step: usize = a
            .parse()
            .map_err(|_| DyDiffError::InvalidInput(format!("bad step in: {line}")))?;
        if step > up_to_step {
            break;
        }
        let v: Real = b
            .parse()
            .map_err(|_| DyDiffError::InvalidInput(format!("bad value in: {line}")))?;
        out.push((step, v));
    }
    Ok(out)
}

const OPT_MAGIC: &[u8; 8] = b"DYDIFOP1";

fn save_optimizer(opt: &Optimizer, step: usize, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + (opt.m.len() + opt.v.len()) * 8);
    bytes.extend_from_slice(OPT_MAGIC);
    bytes.extend_from_slice(&(step as u64).to_le_bytes());
    bytes.extend_from_slice(&opt.count.to_le_bytes());
    bytes.extend_from_slice(&(opt.m.len() as u64).to_le_bytes());
    for v in opt.m.iter().chain(&opt.v) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn load_optimizer(path: &Path, spec: OptimizerSpec) -> Result<(Optimizer, usize)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 32 || &bytes[0..8] != OPT_MAGIC {
        return Err(DyDiffError::Checkpoint("bad optimizer state file".into()));
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
    if bytes.len() != 32 + 2 * len * 8 {
        return Err(DyDiffError::Checkpoint(
            "optimizer state length mismatch".into(),
        ));
    }
    let vals: Vec<Real> = bytes[32..]
        .chunks_exact(8)
        .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut opt = Optimizer::new(spec, len);
    opt.count = count;
    if matches!(spec, OptimizerSpec::Adam { .. }) {
        opt.m = vals[..len].to_vec();
        opt.v = vals[len..].to_vec();
    }
    Ok((opt, step))
}
