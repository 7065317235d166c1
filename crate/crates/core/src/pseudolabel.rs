//! Teacher-side labeling of overlap points.
//!
//! The teacher's queries are matched one-to-one to the scene's boxes using
//! only points whose label is certain (single-box and background points).
//! Each overlap point then goes to whichever of its containing boxes has
//! the highest matched similarity, and the result is merged with the
//! single-box labels into the student's per-instance targets.

use crate::assign::{hungarian, AssignError, Assignment, CostMatrix};
use crate::losses::LossWeights;
use crate::model::{forward, BoundParams, CenterMode, ModelConfig, ModelError, ModelParams, SceneInputs};
use crate::scene::{RegionLabel, RegionPartition, Scene};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("overlap point {0} has fewer than two candidate boxes")]
    Candidates(usize),
}

/// Similarity rows of the matched queries, in instance order (`K x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSimilarity {
    pub rho_prime: Tensor<f64>,
}

/// Overlap-point labels produced by a pseudo-labeler.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMasks {
    /// Assigned instance of each overlap point, in partition order.
    pub assignments: Vec<usize>,
    /// `K` binary masks over the overlap points.
    pub overlap_masks: Vec<Vec<bool>>,
}

impl PseudoMasks {
    pub fn from_assignments(partition: &RegionPartition, assignments: Vec<usize>) -> Self {
        let mut overlap_masks = vec![vec![false; partition.num_overlap()]; partition.num_instances];
        for (u, &k) in assignments.iter().enumerate() {
            overlap_masks[k][u] = true;
        }
        PseudoMasks {
            assignments,
            overlap_masks,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Matching cost of every (instance, query) pair:
/// `bce * BCE + dice * Dice - cls * p(class)`, with the mask terms
/// averaged over the points flagged in `evaluate`.
pub fn match_cost<T: Real>(
    mask_logits: &Tensor<T>,
    class_logits: &Tensor<T>,
    targets: &[Vec<bool>],
    evaluate: &[bool],
    classes: &[usize],
    weights: &LossWeights,
) -> Result<CostMatrix, AssignError> {
    let (nq, n) = mask_logits.dims2().expect("mask logits are a matrix");
    let k = targets.len();
    let probs: Vec<Vec<f64>> = (0..nq)
        .map(|q| softmax_row(&class_logits.row(q).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();
    let count = evaluate.iter().filter(|&&e| e).count().max(1) as f64;
    let mut data = vec![0.0; k * nq];
    for q in 0..nq {
        let logits = mask_logits.row(q);
        // per point: (bce if target, bce if not target, prob)
        let mut bce_neg = 0.0;
        let mut psum = 0.0;
        for j in 0..n {
            if evaluate[j] {
                let x = logits[j].as_f64();
                bce_neg += softplus(x);
                psum += sigmoid(x);
            }
        }
        for (inst, target) in targets.iter().enumerate() {
            let mut bce = bce_neg;
            let mut inter = 0.0;
            let mut tsum = 0.0;
            for j in 0..n {
                if evaluate[j] && target[j] {
                    let x = logits[j].as_f64();
                    bce -= x;
                    inter += sigmoid(x);
                    tsum += 1.0;
                }
            }
            let dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
            data[inst * nq + q] =
                weights.bce * bce / count + weights.dice * dice - weights.cls * probs[q][classes[inst]];
        }
    }
    CostMatrix::new(k, nq, data)
}

/// Matches teacher queries to boxes using single-box labels plus
/// background negatives; overlap points stay out of the cost.
pub fn match_queries<T: Real>(
    mask_logits: &Tensor<T>,
    class_logits: &Tensor<T>,
    partition: &RegionPartition,
    classes: &[usize],
    weights: &LossWeights,
) -> Result<(MatchedSimilarity, Assignment), AssignError> {
    let targets = partition.single_masks();
    for (k, t) in targets.iter().enumerate() {
        if !t.iter().any(|&b| b) {
            log::warn!("instance {k} has no single-box points; its match cost uses background negatives only");
        }
    }
    let evaluate: Vec<bool> = partition
        .labels
        .iter()
        .map(|l| !matches!(l, RegionLabel::Overlap(_)))
        .collect();
    let cost = match_cost(mask_logits, class_logits, &targets, &evaluate, classes, weights)?;
    let assignment = hungarian(&cost);
    let n = partition.num_points();
    let mut rho_prime = Vec::with_capacity(assignment.row_to_col.len() * n);
    for &q in &assignment.row_to_col {
        rho_prime.extend(mask_logits.row(q).iter().map(|&x| sigmoid(x.as_f64())));
    }
    let rho_prime = Tensor::new(vec![assignment.row_to_col.len(), n], rho_prime).expect("k x n");
    Ok((MatchedSimilarity { rho_prime }, assignment))
}

/// Gives every overlap point to the candidate box with the highest matched
/// similarity, ties to the smaller instance index. Other instances are
/// never considered.
pub fn assign_overlap(matched: &MatchedSimilarity, partition: &RegionPartition) -> Result<PseudoMasks, PseudoLabelError> {
    let rho = &matched.rho_prime;
    let assignments = partition
        .overlap
        .iter()
        .zip(&partition.candidates)
        .map(|(&j, cands)| {
            if cands.len() < 2 {
                return Err(PseudoLabelError::Candidates(j));
            }
            let mut best = cands[0];
            for &k in &cands[1..] {
                if rho.row(k)[j] > rho.row(best)[j] {
                    best = k;
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PseudoMasks::from_assignments(partition, assignments))
}

/// Per-instance targets over all points: single-box points of the
/// instance plus the overlap points assigned to it. Background is never
/// positive.
pub fn build_targets(pseudo: &PseudoMasks, partition: &RegionPartition) -> Vec<Vec<bool>> {
    let mut targets = partition.single_masks();
    for (&j, &k) in partition.overlap.iter().zip(&pseudo.assignments) {
        targets[k][j] = true;
    }
    targets
}

/// Everything the student needs from one teacher pass.
#[derive(Debug, Clone)]
pub struct TeacherOutput<T> {
    pub pseudo: PseudoMasks,
    /// `K x N` merged supervision masks.
    pub targets: Vec<Vec<bool>>,
    pub assignment: Assignment,
    pub matched: MatchedSimilarity,
    /// Final content queries, `N_Q x C`.
    pub content: Tensor<T>,
    /// Point features, `N x C`.
    pub features: Tensor<T>,
}

/// Runs the frozen teacher on a scene and turns its output into targets.
/// With `center_refine` off the teacher uses its own position bank like
/// the student does.
pub fn teacher_step<T: Real>(
    teacher: &ModelParams<T>,
    config: &ModelConfig,
    scene: &Scene,
    inputs: &SceneInputs<T>,
    partition: &RegionPartition,
    weights: &LossWeights,
    center_refine: bool,
) -> Result<TeacherOutput<T>, PseudoLabelError> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    teacher_pass(&mut tape, &bound, config, scene, inputs, partition, weights, center_refine)
}

/// [`teacher_step`] on parameters already bound to `tape`. Everything
/// returned is a detached copy, so nothing downstream can reach the
/// teacher's tape nodes.
#[allow(clippy::too_many_arguments)]
pub fn teacher_pass<T: Real>(
    tape: &mut Tape<T>,
    teacher: &BoundParams,
    config: &ModelConfig,
    scene: &Scene,
    inputs: &SceneInputs<T>,
    partition: &RegionPartition,
    weights: &LossWeights,
    center_refine: bool,
) -> Result<TeacherOutput<T>, PseudoLabelError> {
    let mode = if center_refine {
        CenterMode::Teacher {
            centers: &inputs.centers,
        }
    } else {
        CenterMode::Student
    };
    let out = forward(tape, teacher, config, inputs, mode)?;
    let (matched, assignment) = match_queries(
        tape.value(out.mask_logits),
        tape.value(out.class_logits),
        partition,
        &scene.class_ids(),
        weights,
    )?;
    let pseudo = assign_overlap(&matched, partition)?;
    let targets = build_targets(&pseudo, partition);
    Ok(TeacherOutput {
        pseudo,
        targets,
        assignment,
        matched,
        content: tape.value(out.queries.content).clone(),
        features: tape.value(out.features).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{partition_regions, Instance};

    fn two_box_scene() -> Scene {
        let inst = |lo: [f64; 3], hi: [f64; 3], class_id| Instance {
            box_min: lo,
            box_max: hi,
            class_id,
        };
        Scene {
            points: vec![
                [0.0, 0.0, 0.0, 0.0, 0.0, 0.0], // single 0
                [1.5, 0.5, 0.5, 0.0, 0.0, 0.0], // overlap {0, 1}
                [3.0, 1.0, 1.0, 0.0, 0.0, 0.0], // single 1
                [1.2, 0.2, 0.2, 0.0, 0.0, 0.0], // overlap {0, 1}
                [9.0, 9.0, 9.0, 0.0, 0.0, 0.0], // background
            ],
            gt_instance: vec![Some(0), Some(0), Some(1), Some(1), None],
            instances: vec![
                inst([0.0; 3], [2.0, 1.0, 1.0], 0),
                inst([1.0, 0.0, 0.0], [3.0, 1.0, 1.0], 1),
            ],
        }
    }

    fn matched(rows: &[Vec<f64>]) -> MatchedSimilarity {
        MatchedSimilarity {
            rho_prime: Tensor::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn argmax_over_candidates_with_ties() {
        let scene = two_box_scene();
        let p = partition_regions(&scene);
        assert_eq!(p.overlap, vec![1, 3]);
        let m = matched(&[vec![0.0, 0.7, 0.0, 0.5, 0.0], vec![0.0, 0.4, 0.0, 0.5, 0.0]]);
        let pseudo = assign_overlap(&m, &p).unwrap();
        assert_eq!(pseudo.assignments, vec![0, 0]);
        let m = matched(&[vec![0.0, 0.1, 0.0, 0.2, 0.0], vec![0.0, 0.4, 0.0, 0.9, 0.0]]);
        assert_eq!(assign_overlap(&m, &p).unwrap().assignments, vec![1, 1]);
    }

    #[test]
    fn non_candidates_are_ignored() {
        // three boxes; the overlap point is inside 0 and 1 only
        let mut scene = two_box_scene();
        scene.instances.push(Instance {
            box_min: [5.0; 3],
            box_max: [9.0; 3],
            class_id: 0,
        });
        scene.gt_instance[4] = Some(2);
        let p = partition_regions(&scene);
        let m = matched(&[
            vec![0.0, 0.2, 0.0, 0.6, 0.0],
            vec![0.0, 0.3, 0.0, 0.1, 0.0],
            vec![0.0, 0.99, 0.0, 0.99, 0.0],
        ]);
        assert_eq!(assign_overlap(&m, &p).unwrap().assignments, vec![1, 0]);
    }

    #[test]
    fn targets_merge_single_and_overlap() {
        let scene = two_box_scene();
        let p = partition_regions(&scene);
        let pseudo = PseudoMasks::from_assignments(&p, vec![1, 0]);
        assert_eq!(pseudo.overlap_masks, vec![vec![false, true], vec![true, false]]);
        let t = build_targets(&pseudo, &p);
        assert_eq!(t[0], vec![true, false, false, true, false]);
        assert_eq!(t[1], vec![false, true, true, false, false]);
    }

    #[test]
    fn planted_masks_recover_planted_matching() {
        let scene = two_box_scene();
        let p = partition_regions(&scene);
        // query 2 predicts instance 0's single-box mask, query 0 instance 1's
        let strong = 8.0;
        let row = |on: &[usize]| -> Vec<f64> { (0..5).map(|j| if on.contains(&j) { strong } else { -strong }).collect() };
        let logits = Tensor::from_rows(&[row(&[2]), row(&[]), row(&[0]), row(&[])]).unwrap();
        let classes = Tensor::<f64>::zeros(&[4, 3]);
        let (m, a) = match_queries(&logits, &classes, &p, &[0, 1], &LossWeights::default()).unwrap();
        assert_eq!(a.row_to_col, vec![2, 0]);
        assert_eq!(m.rho_prime.row(0), &logits.row(2).iter().map(|&x| sigmoid(x)).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn single_instance_takes_cheapest_query() {
        let scene = Scene {
            points: vec![[0.0; 6], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0], [5.0; 6]],
            gt_instance: vec![Some(0), Some(0), None],
            instances: vec![Instance {
                box_min: [0.0; 3],
                box_max: [1.0; 3],
                class_id: 1,
            }],
        };
        let p = partition_regions(&scene);
        let logits = Tensor::from_rows(&[vec![-3.0, -3.0, 3.0], vec![4.0, 4.0, -4.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let classes = Tensor::<f64>::zeros(&[3, 3]);
        let (m, a) = match_queries(&logits, &classes, &p, &[1], &LossWeights::default()).unwrap();
        assert_eq!(a.row_to_col, vec![1]);
        assert_eq!(m.rho_prime.shape(), &[1, 3]);
    }
}
