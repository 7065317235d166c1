//! Segmentation metrics and the nearest-center comparison labeler.
//!
//! AP follows the usual instance-segmentation protocol: per class and IoU
//! threshold, predictions are taken in descending confidence and greedily
//! matched to the best unmatched ground truth of the same class; precision
//! is interpolated over all recall points. mACC scores overlap-point labels
//! per instance against the true owners.

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::{forward_frozen, CenterMode, ModelConfig, ModelError, ModelParams, SceneInputs};
use crate::parallel::par_map;
use crate::pseudolabel::{teacher_step, PseudoLabelError, PseudoMasks};
use crate::scene::{macc_oracle, RegionPartition, Scene, SceneError};
use crate::tensor::Real;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mask: Vec<bool>,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
}

/// Ground-truth instances of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
}

impl GroundTruth {
    pub fn from_scene(scene: &Scene) -> Self {
        GroundTruth {
            masks: scene.gt_masks(),
            classes: scene.class_ids(),
        }
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Student predictions on one scene. A query yields an instance unless its
/// most likely class is no-object or its thresholded mask is empty; the
/// confidence is the class probability times the mean in-mask similarity.
pub fn extract_predictions<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    inputs: &SceneInputs<T>,
) -> Result<PredictionSet, EvalError> {
    let (tape, out) = forward_frozen(params, config, inputs, CenterMode::Student)?;
    let rho = tape.value(out.rho);
    let logits = tape.value(out.class_logits);
    let mut predictions = Vec::new();
    for q in 0..config.num_queries {
        let row: Vec<f64> = logits.row(q).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        // first maximum wins, so a tie with no-object keeps the real class
        let best = (0..row.len()).fold(0, |b, c| if exps[c] > exps[b] { c } else { b });
        if best == config.num_classes {
            continue;
        }
        let mask: Vec<bool> = rho.row(q).iter().map(|&p| p.as_f64() >= 0.5).collect();
        let (sum, count) = rho
            .row(q)
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, c), (p, _)| (s + p.as_f64(), c + 1));
        if count == 0 {
            continue;
        }
        predictions.push(Prediction {
            mask,
            class_id: best,
            score: exps[best] / z * (sum / count as f64),
        });
    }
    Ok(PredictionSet { predictions })
}

/// Area under the all-point interpolated precision-recall curve of a
/// ranked list of hit/miss decisions.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Hit flags of one class's predictions over a corpus, in ranking order,
/// plus the class's ground-truth count.
fn ranked_hits(corpus: &[(PredictionSet, GroundTruth)], class: usize, threshold: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, &Prediction)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(s, (preds, _))| preds.predictions.iter().map(move |p| (s, p)))
        .filter(|(_, p)| p.class_id == class)
        .collect();
    // stable: equal scores keep corpus order
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = corpus.iter().map(|(_, gt)| vec![false; gt.masks.len()]).collect();
    let hits = ranked
        .iter()
        .map(|&(s, p)| {
            let gt = &corpus[s].1;
            let mut best: Option<(usize, f64)> = None;
            for (g, mask) in gt.masks.iter().enumerate() {
                if gt.classes[g] != class || taken[s][g] {
                    continue;
                }
                let iou = mask_iou(&p.mask, mask);
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[s][g] = true;
            }
            best.is_some()
        })
        .collect();
    let num_gt = corpus
        .iter()
        .map(|(_, gt)| gt.classes.iter().filter(|&&c| c == class).count())
        .sum();
    (hits, num_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_class: Vec<ClassAp>,
}

/// Mean over present classes of the AP at one threshold, and the per-class
/// values.
pub fn ap_at(corpus: &[(PredictionSet, GroundTruth)], num_classes: usize, threshold: f64) -> (f64, Vec<(usize, f64)>) {
    let per: Vec<(usize, f64)> = (0..num_classes)
        .filter_map(|c| {
            let (hits, n) = ranked_hits(corpus, c, threshold);
            (n > 0).then(|| (c, average_precision(&hits, n)))
        })
        .collect();
    let mean = if per.is_empty() {
        0.0
    } else {
        per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64
    };
    (mean, per)
}

pub fn compute_ap(corpus: &[(PredictionSet, GroundTruth)], num_classes: usize) -> ApReport {
    let thresholds = ap_thresholds();
    let sweeps: Vec<(f64, Vec<(usize, f64)>)> = thresholds.iter().map(|&t| ap_at(corpus, num_classes, t)).collect();
    let (ap50, per50) = ap_at(corpus, num_classes, 0.5);
    let (ap25, per25) = ap_at(corpus, num_classes, 0.25);
    let ap = sweeps.iter().map(|(m, _)| m).sum::<f64>() / thresholds.len() as f64;
    let per_class = per25
        .iter()
        .enumerate()
        .map(|(i, &(class_id, ap25))| ClassAp {
            class_id,
            ap: sweeps.iter().map(|(_, per)| per[i].1).sum::<f64>() / thresholds.len() as f64,
            ap50: per50[i].1,
            ap25,
        })
        .collect();
    ApReport {
        ap,
        ap50,
        ap25,
        per_class,
    }
}

/// Per-instance accuracy of overlap labels against the true owners,
/// averaged over instances that are a candidate for at least one overlap
/// point. `None` when the scene has no overlap points.
pub fn compute_macc(pseudo: &PseudoMasks, oracle: &[usize], partition: &RegionPartition) -> Option<f64> {
    if partition.num_overlap() == 0 {
        return None;
    }
    let mut scored = Vec::new();
    for k in 0..partition.num_instances {
        if !partition.candidates.iter().any(|c| c.contains(&k)) {
            continue;
        }
        let correct = pseudo
            .assignments
            .iter()
            .zip(oracle)
            .filter(|&(&a, &o)| (a == k) == (o == k))
            .count();
        scored.push(correct as f64 / oracle.len() as f64);
    }
    Some(scored.iter().sum::<f64>() / scored.len() as f64)
}

/// Mean of the defined per-scene values; `None` if there are none.
pub fn corpus_macc(per_scene: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_scene.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Assigns each overlap point to the candidate whose box center is nearest,
/// ties to the smaller index.
pub fn nearest_center_baseline(partition: &RegionPartition, scene: &Scene) -> PseudoMasks {
    let centers = scene.centers();
    let dist2 = |p: &[f64; 6], c: &[f64; 3]| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
    let assignments = partition
        .overlap
        .iter()
        .zip(&partition.candidates)
        .map(|(&j, cands)| {
            let p = &scene.points[j];
            let mut best = cands[0];
            for &k in &cands[1..] {
                if dist2(p, &centers[k]) < dist2(p, &centers[best]) {
                    best = k;
                }
            }
            best
        })
        .collect();
    PseudoMasks::from_assignments(partition, assignments)
}

/// Everything evaluation needs about one scene.
#[derive(Debug, Clone)]
pub struct EvalScene<T> {
    pub scene: Scene,
    pub partition: RegionPartition,
    pub inputs: SceneInputs<T>,
    pub oracle: Vec<usize>,
}

impl<T: Real> EvalScene<T> {
    pub fn new(scene: Scene) -> Result<Self, EvalError> {
        let partition = crate::scene::partition_regions(&scene);
        let oracle = macc_oracle(&partition, &scene)?;
        Ok(EvalScene {
            inputs: SceneInputs::from_scene(&scene),
            scene,
            partition,
            oracle,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub per_class: Vec<ClassAp>,
    /// Teacher pseudo-label accuracy on overlap points; absent when no
    /// scene has any.
    pub macc: Option<f64>,
    pub baseline_macc: Option<f64>,
    pub scenes: usize,
    pub scenes_with_overlap: usize,
}

/// Teacher pseudo-label accuracy per scene, for the given teacher and
/// position mode.
pub fn teacher_macc<T: Real>(
    teacher: &ModelParams<T>,
    config: &ModelConfig,
    scenes: &[EvalScene<T>],
    weights: &LossWeights,
    center_refine: bool,
) -> Result<Vec<Option<f64>>, EvalError> {
    par_map(scenes, |s| {
        let out = teacher_step(teacher, config, &s.scene, &s.inputs, &s.partition, weights, center_refine)?;
        Ok(compute_macc(&out.pseudo, &s.oracle, &s.partition))
    })
    .into_iter()
    .collect()
}

/// AP of the student's predictions plus mACC of the teacher's and the
/// baseline's overlap labels.
pub fn evaluate<T: Real>(
    student: &ModelParams<T>,
    teacher: &ModelParams<T>,
    config: &ModelConfig,
    scenes: &[EvalScene<T>],
    weights: &LossWeights,
    center_refine: bool,
) -> Result<MetricReport, EvalError> {
    let preds: Vec<PredictionSet> = par_map(scenes, |s| extract_predictions(student, config, &s.inputs))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let corpus: Vec<(PredictionSet, GroundTruth)> = preds
        .into_iter()
        .zip(scenes)
        .map(|(p, s)| (p, GroundTruth::from_scene(&s.scene)))
        .collect();
    let ap = compute_ap(&corpus, config.num_classes);
    let teacher = teacher_macc(teacher, config, scenes, weights, center_refine)?;
    let baseline: Vec<Option<f64>> = scenes
        .iter()
        .map(|s| compute_macc(&nearest_center_baseline(&s.partition, &s.scene), &s.oracle, &s.partition))
        .collect();
    Ok(MetricReport {
        ap: ap.ap,
        ap50: ap.ap50,
        ap25: ap.ap25,
        per_class: ap.per_class,
        macc: corpus_macc(&teacher),
        baseline_macc: corpus_macc(&baseline),
        scenes: scenes.len(),
        scenes_with_overlap: teacher.iter().flatten().count(),
    })
}
