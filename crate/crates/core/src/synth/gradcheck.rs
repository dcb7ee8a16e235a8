use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::experiment::ExperimentConfig;
use super::head::{DetectorHead, TrainSample};
use super::trainer::{check_head_gradient, prepare_samples, relative_error, GradCheck, TrainMode};
use super::world::generate_world;
use crate::error::Result;
use crate::loss::{focal_gradient, focal_term, sigmoid, smooth_l1, smooth_l1_gradient, FocalParams, MaskState};

/// Finite-difference comparison of every analytic gradient in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradSuite {
    pub focal: GradCheck,
    pub regression: GradCheck,
    pub head: GradCheck,
}

impl GradSuite {
    pub fn points(&self) -> usize {
        self.focal.points + self.regression.points + self.head.points
    }

    pub fn max_relative_error(&self) -> f64 {
        self.focal.max_relative_error.max(self.regression.max_relative_error).max(self.head.max_relative_error)
    }
}

fn focal_check(rng: &mut ChaCha8Rng, points: usize) -> Result<GradCheck> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let params = FocalParams::new(rng.gen_range(0.05..0.95), rng.gen_range(0.0..5.0), rng.gen_bool(0.5), 1e-7)?;
        let state = if rng.gen_bool(0.5) { MaskState::PositiveTarget } else { MaskState::NegativeActive };
        let x: f64 = rng.gen_range(-10.0..10.0);
        let numeric =
            (focal_term(sigmoid(x + h), state, &params) - focal_term(sigmoid(x - h), state, &params)) / (2.0 * h);
        worst = worst.max(relative_error(focal_gradient(sigmoid(x), state, &params), numeric));
    }
    Ok(GradCheck { points, max_relative_error: worst })
}

fn regression_check(rng: &mut ChaCha8Rng, points: usize, beta: f64) -> GradCheck {
    let h = 1e-7;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let r: f64 = rng.gen_range(-2.0..2.0);
        if (r.abs() - beta).abs() < 1e-4 {
            continue;
        }
        let numeric = (smooth_l1(r + h, beta) - smooth_l1(r - h, beta)) / (2.0 * h);
        worst = worst.max(relative_error(smooth_l1_gradient(r, beta), numeric));
        done += 1;
    }
    GradCheck { points, max_relative_error: worst }
}

/// Runs all three checks on a small world built from `cfg`.
///
/// `head_trials` random heads are each checked on every parameter against a
/// mini-batch of two images, once with the dataset-aware and once with the
/// naive mask.
pub fn gradient_suite(cfg: &ExperimentConfig, seed: u64, scalar_points: usize, head_trials: usize) -> Result<GradSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = focal_check(&mut rng, scalar_points)?;
    let regression = regression_check(&mut rng, scalar_points, cfg.loss.smooth_l1_beta);

    let mut world_cfg = cfg.world.clone();
    world_cfg.seed = seed;
    world_cfg.images_per_dataset = world_cfg.images_per_dataset.clamp(1, 4);
    world_cfg.test_images = 0;
    let world = generate_world(&world_cfg, &cfg.policy)?;
    let manifest = world.manifest(&cfg.merge)?;
    let k = manifest.label_space.num_classes();
    let mut head_check = GradCheck { points: 0, max_relative_error: 0.0 };
    for mode in [TrainMode::DatasetAware, TrainMode::NaiveConcat] {
        let samples = prepare_samples(&manifest, &world, &cfg.anchors, &cfg.loss, &mode)?;
        for _ in 0..head_trials {
            let mut head = DetectorHead::zeros(k, world_cfg.feature_dim);
            for p in head.parameters_mut() {
                *p = rng.gen_range(-0.3..0.3);
            }
            let batch: Vec<&TrainSample> = (0..2).map(|_| &samples[rng.gen_range(0..samples.len())]).collect();
            let c = check_head_gradient(&head, &batch, &cfg.loss, 1e-6)?;
            head_check.points += c.points;
            head_check.max_relative_error = head_check.max_relative_error.max(c.max_relative_error);
        }
    }
    Ok(GradSuite { focal, regression, head: head_check })
}
