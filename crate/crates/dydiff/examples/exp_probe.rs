//! Probe: loss and CRPS trajectories for the blobs task, eta 0 vs 0.5.

use dydiff::data::{gen_advected_blobs, VelocityFieldSpec};
use dydiff::denoiser::{ArchSpec, Denoiser, ModelConfig};
use dydiff::metrics::{crps_ensemble, Ensemble, Pool};
use dydiff::sampler::{sample, SamplerConfig, SamplerKind};
use dydiff::schedule::ScheduleSpec;
use dydiff::trainer::{train_step, Optimizer, OptimizerSpec, TrainingPath};
use dydiff::{Real, RngFactory};
use rand::Rng;
use rayon::prelude::*;

fn main() {
    let field = VelocityFieldSpec {
        base: (0.0, 0.0),
        jitter: 0.25,
        num_blobs: 2,
        sigma: 2.0,
    };
    let (p, s, grid) = (1usize, 2usize, 8usize);
    let train = gen_advected_blobs(12, 20, grid, &field, 5000).unwrap().normalized();
    let eval = gen_advected_blobs(4, 20, grid, &field, 6000).unwrap().normalized();
    let train_windows: Vec<_> = train.window_iter(p, s, Some(0)).unwrap().collect();
    let eval_windows: Vec<_> = eval.window_iter(p, s, Some(7)).unwrap().take(24).collect();

    for eta in [0.0, 0.5] {
        let mut spec = ScheduleSpec::new(60, eta);
        spec.beta_start = 0.002;
        spec.beta_end = 18.0 / 60.0;
        let schedule = spec.build().unwrap();
        let model = Denoiser::new(ModelConfig {
            p,
            s,
            frame_shape: vec![grid, grid],
            time_embed_dim: 8,
            arch: ArchSpec::Conv { channels: 16, blocks: 1 },
        })
        .unwrap();
        let factory = RngFactory::new(0);
        let mut params = model.init_params(&mut factory.stream(&[1]));
        let mut opt = Optimizer::new(OptimizerSpec::adam_default(), params.len());
        println!("eta = {eta}");
        for step in 0..8000u64 {
            let mut rng = factory.stream(&[2, step]);
            let batch: Vec<_> = (0..16)
                .map(|_| train_windows[rng.gen_range(0..train_windows.len())].clone())
                .collect();
            let loss = train_step(
                &model, &mut params, &mut opt, &schedule, &batch, 2e-3,
                TrainingPath::DyDiff { independent_noise: false }, &mut rng,
            )
            .unwrap();
            if (step + 1) % 1000 == 0 {
                let crps = if (step + 1) % 2000 == 0 {
                    let sampler = SamplerConfig {
                        kind: SamplerKind::DydiffDdim,
                        num_steps: 30,
                        stochastic: false,
                    };
                    let ef = RngFactory::new(3000);
                    let scores: Vec<Real> = eval_windows
                        .par_iter()
                        .enumerate()
                        .map(|(wi, w)| {
                            let members: Vec<_> = (0..8)
                                .map(|m| {
                                    sample(&(&model, &params), w.observations(), s, &schedule,
                                        &sampler, &mut ef.stream(&[wi as u64, m as u64]), None)
                                        .unwrap()
                                })
                                .collect();
                            crps_ensemble(&Ensemble::new(members).unwrap(), w.targets(), Pool::Avg, 2)
                                .unwrap()
                        })
                        .collect();
                    format!("crps={:.4}", scores.iter().sum::<Real>() / scores.len() as Real)
                } else {
                    String::new()
                };
                println!("  step {:5}  loss={loss:.4}  {crps}", step + 1);
            }
        }
    }
}
