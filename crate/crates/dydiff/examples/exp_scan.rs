//! Scratch harness for sizing the directional experiments.

use dydiff::data::{gen_linear_gaussian, SequenceWindow, TransitionSpec};
use dydiff::denoiser::{ArchSpec, Denoiser, ModelConfig};
use dydiff::metrics::{crps_ensemble, Ensemble, Pool};
use dydiff::sampler::{sample, SamplerConfig, SamplerKind};
use dydiff::schedule::ScheduleSpec;
use dydiff::trainer::{train_loop, OptimizerSpec, TrainConfig};
use dydiff::{Real, RngFactory};
use rayon::prelude::*;

struct Task {
    train_windows: Vec<SequenceWindow>,
    eval_windows: Vec<SequenceWindow>,
    p: usize,
    s: usize,
    frame_shape: Vec<usize>,
    conv: bool,
    pool_w: usize,
}

fn blob_task(seed: u64, p: usize, s: usize, grid: usize) -> Task {
    use dydiff::data::{gen_advected_blobs, VelocityFieldSpec};
    let field = VelocityFieldSpec {
        base: (std::env::var("VY").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0),
               std::env::var("VX").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0)),
        jitter: std::env::var("JIT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.25),
        num_blobs: 2,
        sigma: std::env::var("SIG").ok().and_then(|v| v.parse().ok()).unwrap_or(2.0),
    };
    let train = gen_advected_blobs(12, 20, grid, &field, 5000 + seed)
        .unwrap()
        .normalized();
    let eval = gen_advected_blobs(4, 20, grid, &field, 6000 + seed)
        .unwrap()
        .normalized();
    Task {
        train_windows: train.window_iter(p, s, Some(seed)).unwrap().collect(),
        eval_windows: eval
            .window_iter(p, s, Some(seed + 7))
            .unwrap()
            .take(24)
            .collect(),
        p,
        s,
        frame_shape: vec![grid, grid],
        conv: true,
        pool_w: 2,
    }
}

fn linear_task(seed: u64, p: usize, s: usize) -> Task {
    let dim = 2;
    let spec = TransitionSpec::ScaledIdentity { factor: 0.9 };
    let q = (1.0f64 - 0.81).sqrt();
    let train = gen_linear_gaussian(24, 40, dim, &spec, q, 1000 + seed)
        .unwrap()
        .normalized();
    let eval = gen_linear_gaussian(6, 40, dim, &spec, q, 2000 + seed)
        .unwrap()
        .normalized();
    Task {
        train_windows: train.window_iter(p, s, Some(seed)).unwrap().collect(),
        eval_windows: eval
            .window_iter(p, s, Some(seed + 7))
            .unwrap()
            .take(48)
            .collect(),
        p,
        s,
        frame_shape: vec![dim],
        conv: false,
        pool_w: 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_crps(
    model: &Denoiser,
    params: &dydiff::denoiser::DenoiserParams,
    schedule: &dydiff::Schedule,
    task: &Task,
    sampler: &SamplerConfig,
    ensemble_m: usize,
    eval_seed: u64,
) -> Real {
    let factory = RngFactory::new(eval_seed);
    let scores: Vec<Real> = task
        .eval_windows
        .par_iter()
        .enumerate()
        .map(|(wi, w)| {
            let members: Vec<_> = (0..ensemble_m)
                .map(|m| {
                    sample(
                        &(model, params),
                        w.observations(),
                        task.s,
                        schedule,
                        sampler,
                        &mut factory.stream(&[wi as u64, m as u64]),
                        None,
                    )
                    .unwrap()
                })
                .collect();
            crps_ensemble(&Ensemble::new(members).unwrap(), w.targets(), Pool::Avg, task.pool_w)
                .unwrap()
        })
        .collect();
    scores.iter().sum::<Real>() / scores.len() as Real
}

#[allow(clippy::too_many_arguments)]
fn run(
    task: &Task,
    eta: Real,
    seed: u64,
    independent_noise: bool,
    t_max: usize,
    steps: usize,
    hidden: usize,
    lr: Real,
    num_steps: usize,
) -> Real {
    // Linear betas scaled so alpha_bar(T) ~ 1e-4 at small T (keeps the
    // eta = 1.0 sweep above the inverse-dynamics floor).
    let mut spec = ScheduleSpec::new(t_max, eta);
    spec.beta_start = 0.002;
    spec.beta_end = 18.0 / t_max as Real;
    let schedule = spec.build().unwrap();
    let arch = if task.conv {
        ArchSpec::Conv {
            channels: hidden,
            blocks: 1,
        }
    } else {
        ArchSpec::Mlp { hidden, blocks: 1 }
    };
    let model = Denoiser::new(ModelConfig {
        p: task.p,
        s: task.s,
        frame_shape: task.frame_shape.clone(),
        time_embed_dim: 8,
        arch,
    })
    .unwrap();
    let config = TrainConfig {
        steps,
        batch_size: 16,
        learning_rate: lr,
        optimizer: OptimizerSpec::adam_default(),
        seed,
        eval_every: 10_000,
        checkpoint_every: 1_000_000,
        independent_noise,
    };
    let out = train_loop(
        &model,
        &schedule,
        &spec,
        &task.train_windows,
        &config,
        "scan",
        None,
        None,
    )
    .unwrap();
    let sampler = SamplerConfig {
        kind: SamplerKind::DydiffDdim,
        num_steps,
        stochastic: false,
    };
    eval_crps(&model, &out.params, &schedule, task, &sampler, 8, 3000 + seed)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let t_max: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(80);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    let lr: Real = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let num_steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(40);
    let task_kind = args.get(6).map(|s| s.as_str()).unwrap_or("linear").to_string();
    let s_env: usize = std::env::var("SLEN").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    let (p, s) = if task_kind == "blobs" { (1, s_env) } else { (2, 4) };
    println!("task={task_kind} steps={steps} t_max={t_max} hidden={hidden} lr={lr} num_steps={num_steps} p={p} s={s}");

    for seed in 0..3u64 {
        let task = if task_kind == "blobs" {
            blob_task(seed, p, s, 8)
        } else {
            linear_task(seed, p, s)
        };
        let start = std::time::Instant::now();
        let quick = std::env::var("QUICK").is_ok();
        let mut results: Vec<(String, Real)> = vec![
            ("eta0.0".into(), run(&task, 0.0, seed, false, t_max, steps, hidden, lr, num_steps)),
            ("eta0.5".into(), run(&task, 0.5, seed, false, t_max, steps, hidden, lr, num_steps)),
            ("indep0.5".into(), run(&task, 0.5, seed, true, t_max, steps, hidden, lr, num_steps)),
        ];
        if !quick {
            results.push(("eta0.1".into(), run(&task, 0.1, seed, false, t_max, steps, hidden, lr, num_steps)));
            results.push(("eta0.9".into(), run(&task, 0.9, seed, false, t_max, steps, hidden, lr, num_steps)));
            results.push(("eta1.0".into(), run(&task, 1.0, seed, false, t_max, steps, hidden, lr, num_steps)));
        }
        print!("seed {seed}: ");
        for (name, v) in &results {
            print!("{name}={v:.4}  ");
        }
        println!("({:.1}s)", start.elapsed().as_secs_f64());
    }
}
