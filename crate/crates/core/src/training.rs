//! The student-teacher loop.
//!
//! Every step the frozen teacher labels the overlap points of one scene,
//! the student is fit to the merged targets plus the two consistency
//! terms, and the teacher then moves toward the student by an exponential
//! moving average.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{hungarian, AssignError};
use crate::losses::{
    bce_mask_loss, class_targets, classification_loss, dice_loss, masked_feature_consistency, query_consistency,
    total_loss, LossError, LossParts, LossReport, LossWeights,
};
use crate::model::{forward, BoundParams, CenterMode, ModelConfig, ModelError, ModelParams, SceneInputs, POSITION_BANK};
use crate::pseudolabel::{match_cost, teacher_pass, teacher_step, PseudoLabelError, TeacherOutput};
use crate::scene::{partition_regions, RegionPartition, Scene};
use crate::tensor::{Real, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("parameter sets differ in names or shapes")]
    ShapeMismatch,
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent ramping up to the peak rate.
    pub warmup_fraction: f64,
    /// Peak rate as a multiple of `lr`.
    pub peak_factor: f64,
    /// Final rate is `lr / final_divisor`.
    pub final_divisor: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub weights: LossWeights,
    /// Teacher positions from instance centers; off reproduces the
    /// learnable-bank ablation.
    pub center_refine: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            warmup_fraction: 0.3,
            peak_factor: 10.0,
            final_divisor: 25.0,
            ema_decay: 0.99,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            center_refine: true,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive, weight_decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.peak_factor >= 1.0) || !(self.final_divisor > 0.0) {
            return bad("peak_factor must be >= 1 and final_divisor positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr * self.peak_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.lr / self.final_divisor
    }

    fn warmup_steps(&self) -> usize {
        ((self.steps - 1) as f64 * self.warmup_fraction).round() as usize
    }
}

/// One-cycle schedule: cosine ramp from `lr` to the peak over the warmup,
/// then cosine decay to the final rate at the last step.
pub fn one_cycle_lr(step: usize, config: &TrainConfig) -> f64 {
    let cosine = |from: f64, to: f64, t: f64| match t {
        t if t <= 0.0 => from,
        t if t >= 1.0 => to,
        t => to + (from - to) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0,
    };
    let last = config.steps.saturating_sub(1);
    let step = step.min(last);
    let warm = config.warmup_steps();
    if step < warm {
        cosine(config.lr, config.peak_lr(), step as f64 / warm as f64)
    } else if last == warm {
        config.peak_lr()
    } else {
        cosine(config.peak_lr(), config.final_lr(), (step - warm) as f64 / (last - warm) as f64)
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<(), TrainError> {
    if !teacher.same_shapes(student) {
        return Err(TrainError::ShapeMismatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config(format!("ema decay {alpha} outside [0, 1]")));
    }
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// First and second moment estimates, one pair per parameter array in name
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Decoupled weight decay applies to weight matrices only: not to biases,
/// norm gains, or the position bank, which lives in coordinate space.
fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != POSITION_BANK
}

/// One AdamW update with bias correction.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    state: &mut AdamState<T>,
    grads: &[Vec<T>],
    lr: f64,
    config: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let (one, eps) = (T::one(), T::lit(config.adam_eps));
    let step = T::lit(lr / c1);
    let c2 = T::lit(c2);
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let decay = if decays(name, p.shape()) {
            T::lit(1.0 - lr * config.weight_decay)
        } else {
            one
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let denom = (v[j] / c2).sqrt() + eps;
            *w = *w * decay - step * m[j] / denom;
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Which student query serves each instance, from matching the student's
/// predictions against the merged targets.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentMatch {
    pub instance_to_query: Vec<usize>,
}

/// Student forward, student-side matching and every loss term against a
/// finished teacher pass. Returns the weighted total on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &BoundParams,
    config: &ModelConfig,
    scene: &Scene,
    inputs: &SceneInputs<T>,
    teacher: &TeacherOutput<T>,
    weights: &LossWeights,
) -> Result<(crate::tensor::Var, LossReport, StudentMatch), TrainError> {
    let out = forward(tape, student, config, inputs, CenterMode::Student)?;
    let classes = scene.class_ids();
    let everywhere = vec![true; inputs.num_points()];
    let cost = match_cost(
        tape.value(out.mask_logits),
        tape.value(out.class_logits),
        &teacher.targets,
        &everywhere,
        &classes,
        weights,
    )?;
    let instance_to_query = hungarian(&cost).row_to_col;

    let logits = tape.gather_rows(out.mask_logits, &instance_to_query)?;
    let probs = tape.gather_rows(out.rho, &instance_to_query)?;
    let bce = bce_mask_loss(tape, logits, &teacher.targets)?;
    let dice = dice_loss(tape, probs, &teacher.targets)?;

    let mut query_to_instance = vec![None; config.num_queries];
    for (k, &q) in instance_to_query.iter().enumerate() {
        query_to_instance[q] = Some(k);
    }
    let cls_targets = class_targets(&query_to_instance, &classes, config.num_classes);
    let cls = classification_loss(tape, out.class_logits, &cls_targets)?;

    // A switched-off consistency term is not evaluated at all and reports 0.
    let zero = || Tensor::scalar(T::zero());
    let q = if weights.q > 0.0 {
        query_consistency(tape, out.queries.content, &teacher.content)?
    } else {
        tape.constant(zero())
    };
    let f = if weights.f > 0.0 {
        let half = T::lit(0.5);
        let rho = tape.value(probs);
        let student_masks: Vec<Vec<bool>> = (0..instance_to_query.len())
            .map(|k| rho.row(k).iter().map(|&p| p >= half).collect())
            .collect();
        masked_feature_consistency(tape, &teacher.features, &teacher.targets, out.features, &student_masks)?.0
    } else {
        tape.constant(zero())
    };

    let parts = LossParts { bce, dice, cls, q, f };
    let (total, report) = total_loss(tape, &parts, weights)?;
    Ok((total, report, StudentMatch { instance_to_query }))
}

/// Student, teacher and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: ModelParams<T>) -> Self {
        TrainState {
            teacher: student.clone(),
            adam: AdamState::new(&student),
            student,
            step: 0,
        }
    }
}

/// A scene with everything derived from it that stays fixed during training.
#[derive(Debug, Clone)]
pub struct PreparedScene<T> {
    pub seed: u64,
    pub scene: Scene,
    pub partition: RegionPartition,
    pub inputs: SceneInputs<T>,
}

impl<T: Real> PreparedScene<T> {
    pub fn new(seed: u64, scene: Scene) -> Self {
        PreparedScene {
            seed,
            partition: partition_regions(&scene),
            inputs: SceneInputs::from_scene(&scene),
            scene,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimization step on one scene. On any failure the state is left
/// exactly as it was.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    model: &ModelConfig,
    config: &TrainConfig,
    scene: &PreparedScene<T>,
) -> Result<StepOutcome, TrainError> {
    let teacher = teacher_step(
        &state.teacher,
        model,
        &scene.scene,
        &scene.inputs,
        &scene.partition,
        &config.weights,
        config.center_refine,
    )?;
    let mut tape = Tape::new();
    let bound = state.student.bind(&mut tape, true);
    let (total, report, _) = student_loss(&mut tape, &bound, model, &scene.scene, &scene.inputs, &teacher, &config.weights)?;
    let g = tape.backward(total)?;
    let mut grads = Vec::new();
    for (name, p) in state.student.iter() {
        let grad = match g.get(bound.var(name)) {
            Some(v) => v.to_vec(),
            None => vec![T::zero(); p.numel()],
        };
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step: state.step,
            });
        }
        grads.push(grad);
    }
    // Nothing has been mutated yet, so an error above is a clean rollback.
    let grad_norm = clip_grad_norm(&mut grads, config.grad_clip);
    let lr = one_cycle_lr(state.step as usize, config);
    adamw_step(&mut state.student, &mut state.adam, &grads, lr, config);
    ema_update(&mut state.teacher, &state.student, config.ema_decay)?;
    state.step += 1;
    Ok(StepOutcome { report, lr, grad_norm })
}

/// Squared norm of the gradient the student's loss sends into the teacher
/// when the teacher runs on the same tape with tracked parameters. Zero
/// whenever teacher outputs are properly detached.
pub fn teacher_gradient_probe<T: Real>(
    state: &TrainState<T>,
    model: &ModelConfig,
    config: &TrainConfig,
    scene: &PreparedScene<T>,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let teacher_vars = state.teacher.bind(&mut tape, true);
    let teacher = teacher_pass(
        &mut tape,
        &teacher_vars,
        model,
        &scene.scene,
        &scene.inputs,
        &scene.partition,
        &config.weights,
        config.center_refine,
    )?;
    let student_vars = state.student.bind(&mut tape, true);
    let (total, _, _) = student_loss(&mut tape, &student_vars, model, &scene.scene, &scene.inputs, &teacher, &config.weights)?;
    let g = tape.backward(total)?;
    Ok(teacher_vars
        .iter()
        .filter_map(|(_, &v)| g.get(v))
        .flatten()
        .map(|x| x.as_f64() * x.as_f64())
        .sum())
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub q: f64,
    pub f: f64,
    pub total: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,bce,dice,cls,q,f,total,lr";

    pub fn new(step: u64, outcome: &StepOutcome) -> Self {
        let r = &outcome.report;
        MetricsRow {
            step,
            bce: r.bce,
            dice: r.dice,
            cls: r.cls,
            q: r.q,
            f: r.f,
            total: r.total,
            lr: outcome.lr,
        }
    }
}

/// Renders rows as CSV. Floats use the shortest representation that
/// round-trips, so equal runs give byte-equal files.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", r.step, r.bce, r.dice, r.cls, r.q, r.f, r.total, r.lr);
    }
    out
}

/// Visiting order of the corpus: consecutive seed-shuffled epochs.
pub fn scene_schedule(num_scenes: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e5);
    let mut order = Vec::with_capacity(steps);
    let mut epoch: Vec<usize> = (0..num_scenes).collect();
    while order.len() < steps {
        epoch.shuffle(&mut rng);
        order.extend(epoch.iter().copied().take(steps - order.len()));
    }
    order
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<MetricsRow>,
    /// Steps rolled back because of non-finite values.
    pub aborted: usize,
}

/// Trains from a fresh initialization for `config.steps` steps. Parameters
/// are drawn from `config.seed`; a step that fails on non-finite values is
/// logged, rolled back and skipped.
pub fn train<T: Real>(
    model: &ModelConfig,
    config: &TrainConfig,
    corpus: &[PreparedScene<T>],
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<TrainRun<T>, TrainError> {
    model.validate()?;
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut state = TrainState::new(ModelParams::init(model, config.seed)?);
    let mut metrics = Vec::with_capacity(config.steps);
    let mut aborted = 0;
    for idx in scene_schedule(corpus.len(), config.steps, config.seed) {
        let scene = &corpus[idx];
        match train_step(&mut state, model, config, scene) {
            Ok(outcome) => {
                let row = MetricsRow::new(state.step - 1, &outcome);
                on_step(&row);
                metrics.push(row);
            }
            Err(e @ (TrainError::Loss(LossError::NonFinite { .. }) | TrainError::NonFiniteGradient { .. })) => {
                log::warn!(
                    "step {} aborted on scene seed {} (run seed {}): {e}",
                    state.step,
                    scene.seed,
                    config.seed
                );
                aborted += 1;
                // skip the scene but keep the schedule moving
                state.step += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        state,
        metrics,
        aborted,
    })
}
