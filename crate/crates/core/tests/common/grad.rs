//! Finite-difference checks of every loss term and of the full student
//! objective, at 64-bit.

use boxseg::losses::{
    bce_mask_loss, classification_loss, dice_loss, masked_feature_consistency, query_consistency, LossWeights,
};
use boxseg::model::{ModelParams, SceneInputs};
use boxseg::pseudolabel::teacher_step;
use boxseg::scene::partition_regions;
use boxseg::tensor::{grad_check, Tape, Tensor, TensorError};
use boxseg::training::student_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tiny_model, tiny_scene};

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_masks(rows: usize, cols: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_bool(0.4)).collect()).collect()
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

pub fn bce(seed: u64) -> f64 {
    let target = random_masks(4, 25, seed);
    let x = random(&[4, 25], -3.0, 3.0, seed + 1);
    grad_check(|t, v| bce_mask_loss(t, v, &target).map_err(err), &x, STEP).unwrap()
}

/// Dice on sigmoid probabilities, as the model produces them.
pub fn dice(seed: u64) -> f64 {
    let target = random_masks(3, 20, seed);
    let x = random(&[3, 20], -3.0, 3.0, seed + 1);
    let f = |t: &mut Tape<f64>, v| {
        let p = t.sigmoid(v);
        dice_loss(t, p, &target).map_err(err)
    };
    grad_check(f, &x, STEP).unwrap()
}

pub fn classification(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    let x = random(&[5, 4], -2.0, 2.0, seed + 1);
    grad_check(|t, v| classification_loss(t, v, &targets).map_err(err), &x, STEP).unwrap()
}

/// Every student entry sits at least 0.05 from the teacher's, clear of
/// the absolute value's kink.
pub fn query(seed: u64) -> f64 {
    let teacher = random(&[4, 6], -1.0, 1.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let shifted = teacher
        .data()
        .iter()
        .map(|v| v + if rng.gen_bool(0.5) { 0.1 } else { -0.1 } + rng.gen_range(-0.05..0.05))
        .collect();
    let x = Tensor::new(teacher.shape().to_vec(), shifted).unwrap();
    grad_check(|t, v| query_consistency(t, v, &teacher).map_err(err), &x, STEP).unwrap()
}

pub fn feature(seed: u64) -> f64 {
    let tf = random(&[20, 5], -1.0, 1.0, seed);
    let tm = random_masks(3, 20, seed + 1);
    let sm = random_masks(3, 20, seed + 2);
    let x = random(&[20, 5], -1.0, 1.0, seed + 3);
    grad_check(|t, v| masked_feature_consistency(t, &tf, &tm, v, &sm).map(|r| r.0).map_err(err), &x, STEP).unwrap()
}

/// Whole student objective with respect to all parameters at once, against
/// a fixed teacher pass. The teacher is a different initialization so no
/// query sits on the L1 kink.
pub fn full_objective(seed: u64) -> f64 {
    let config = tiny_model();
    let weights = LossWeights::default();
    let scene = tiny_scene(seed);
    let partition = partition_regions(&scene);
    let inputs = SceneInputs::<f64>::from_scene(&scene);
    let student = ModelParams::<f64>::init(&config, 100 + seed).unwrap();
    let teacher_params = ModelParams::<f64>::init(&config, 200 + seed).unwrap();
    let teacher = teacher_step(&teacher_params, &config, &scene, &inputs, &partition, &weights, true).unwrap();
    let flat = Tensor::new(vec![student.num_values()], student.flatten()).unwrap();
    let f = |tape: &mut Tape<f64>, v| {
        let bound = student.bind_flat(tape, v).map_err(err)?;
        let (total, _, _) = student_loss(tape, &bound, &config, &scene, &inputs, &teacher, &weights).map_err(err)?;
        Ok(total)
    };
    grad_check(f, &flat, STEP).unwrap()
}

/// Named worst-case relative errors of every check.
pub fn all_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("bce", bce(1)),
        ("dice", dice(3)),
        ("cls", classification(5)),
        ("q", query(6)),
        ("f", feature(8)),
        ("full", full_objective(3).max(full_objective(4))),
    ]
}
