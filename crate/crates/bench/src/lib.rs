//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatsr::densify::CandidatePoint;
use splatsr::math::Vec3;
use splatsr::model::Model;
use splatsr::synth::SynthScene;
use splatsr::{synth, Camera, NeuralGaussian, SynthSceneSpec, TrainConfig};

/// The default synthetic scene with a freshly initialised model.
pub fn scene() -> (SynthScene, Model) {
    let scene = synth(&SynthSceneSpec::default()).expect("default scene");
    let model = Model::new(
        TrainConfig::default().model,
        &scene.dataset.points,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .expect("model");
    (scene, model)
}

/// HR camera of the first training view.
pub fn hr_camera(scene: &SynthScene) -> Camera {
    let ds = &scene.dataset;
    ds.hr_camera(ds.train[0]).expect("camera")
}

pub fn gaussians(scene: &SynthScene) -> &[NeuralGaussian] {
    &scene.gaussians
}

/// `n` candidates scattered around a few surface patches, seen from 4 views.
pub fn candidates(n: usize, seed: u64) -> Vec<CandidatePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec3> = (0..16)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    (0..n)
        .map(|i| {
            let c = centres[i % centres.len()];
            CandidatePoint {
                x: [
                    c.x + rng.random_range(-0.05..0.05),
                    c.y + rng.random_range(-0.05..0.05),
                    c.z + rng.random_range(-0.05..0.05),
                ],
                view: rng.random_range(0..4),
                pixel: ((i % 256) as u32, (i / 256) as u32),
                err: rng.random_range(0.1..1.0),
            }
        })
        .collect()
}

/// Query points spread over contracted space.
pub fn query_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect()
}
