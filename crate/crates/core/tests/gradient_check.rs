//! Analytic gradients of the denoiser loss against central finite differences, in f64.

mod support;

use prodapt_core::diffusion::{Architecture, DenoiserModel, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{max_relative_gradient_error, Batch};

#[test]
fn toy_network_gradients_match_finite_differences() {
    let arch = Architecture {
        horizon: 4,
        action_dim: 2,
        cond_dim: 3,
        step_embed_dim: 8,
        widths: vec![8, 16],
        kernel: 3,
        groups: 4,
        mid_blocks: 0,
        n_diff: 10,
    };
    let err = max_relative_gradient_error(&arch, 5, 20, 1);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn standard_network_gradients_match_finite_differences() {
    let arch = Architecture::standard(20, 52, 45);
    let err = max_relative_gradient_error(&arch, 5, 20, 2);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn duplicated_sample_has_identical_loss() {
    let arch = Architecture::standard(8, 6, 45);
    let sched = NoiseSchedule::cosine(45).unwrap();
    let model = DenoiserModel::<f32>::new_fully_random(&arch, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut batch = Batch::random(&mut rng, &arch, 1);
    batch.plans.push(batch.plans[0].clone());
    batch.conds.push(batch.conds[0].clone());
    batch.steps.push(batch.steps[0]);
    batch.eps.push(batch.eps[0].clone());
    let g = model.chunk_loss_and_gradients(&batch.examples(), &sched.alpha_bar, 2.0).unwrap();
    assert_eq!(g.losses[0], g.losses[1]);
}

#[test]
fn fresh_model_loss_is_about_one_per_element() {
    let arch = Architecture::standard(20, 52, 45);
    let sched = NoiseSchedule::cosine(45).unwrap();
    let model = DenoiserModel::<f32>::new(&arch, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = Batch::random(&mut rng, &arch, 256);
    let g = model.chunk_loss_and_gradients(&batch.examples(), &sched.alpha_bar, 256.0).unwrap();
    let mean = g.losses.iter().sum::<f64>() / 256.0;
    // Zero output against unit-variance noise: mean of 40 squared normals / 40.
    assert!((mean - 1.0).abs() < 0.05, "initial loss {mean}");
}
