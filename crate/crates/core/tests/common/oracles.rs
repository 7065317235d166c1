//! Reference computations written without the library's code paths.

use boxseg::eval::{GroundTruth, PredictionSet};

/// Minimum total cost over all injective row -> column maps, by
/// depth-first enumeration with a bound on the running sum. Sums are
/// accumulated in row order, as a matched assignment's cost would be.
pub fn min_assignment_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], picked: &mut Vec<usize>, best: &mut f64) {
        if row == cost.len() {
            let total = picked.iter().enumerate().fold(0.0, |acc, (r, &c)| acc + cost[r][c]);
            *best = best.min(total);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                picked.push(c);
                go(cost, row + 1, used, picked, best);
                picked.pop();
                used[c] = false;
            }
        }
    }
    if cost.is_empty() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best);
    best
}

/// First index `t` at which `picks[t]` is not the farthest remaining point
/// from the prefix `picks[..t]` (ties to the smaller index), if any.
pub fn fps_violation(coords: &[[f64; 3]], picks: &[usize]) -> Option<usize> {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>();
    let mut nearest = vec![f64::INFINITY; coords.len()];
    let mut taken = vec![false; coords.len()];
    for t in 0..picks.len() {
        if t > 0 {
            let prev = picks[t - 1];
            taken[prev] = true;
            for (j, n) in nearest.iter_mut().enumerate() {
                *n = n.min(d2(&coords[j], &coords[prev]));
            }
            let chosen = picks[t];
            if taken[chosen] {
                return Some(t);
            }
            let ok = (0..coords.len())
                .filter(|&j| !taken[j] && j != chosen)
                .all(|j| nearest[chosen] > nearest[j] || (nearest[chosen] == nearest[j] && chosen < j));
            if !ok {
                return Some(t);
            }
        }
    }
    None
}

/// One class's AP at one IoU threshold by explicit PR enumeration: greedy
/// claiming in descending score order, then the sum over distinct recall
/// levels of the recall gain times the best precision at or beyond it.
/// `None` when the class has no ground truth.
pub fn class_ap(corpus: &[(PredictionSet, GroundTruth)], class: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = corpus.iter().map(|(_, g)| g.classes.iter().filter(|&&c| c == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut preds: Vec<(f64, usize, &Vec<bool>)> = Vec::new();
    for (s, (p, _)) in corpus.iter().enumerate() {
        for q in p.predictions.iter().filter(|q| q.class_id == class) {
            preds.push((q.score, s, &q.mask));
        }
    }
    preds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut claimed = vec![Vec::new(); corpus.len()];
    let mut curve = Vec::new();
    let mut tp = 0;
    for (rank, (_, s, mask)) in preds.iter().enumerate() {
        let gt = &corpus[*s].1;
        let best = (0..gt.masks.len())
            .filter(|&g| gt.classes[g] == class && !claimed[*s].contains(&g))
            .map(|g| {
                let inter = mask.iter().zip(&gt.masks[g]).filter(|(a, b)| **a && **b).count();
                let union = mask.iter().zip(&gt.masks[g]).filter(|(a, b)| **a || **b).count();
                (g, if union == 0 { 0.0 } else { inter as f64 / union as f64 })
            })
            .filter(|&(_, iou)| iou >= thr)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            claimed[*s].push(g);
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).collect();
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

/// Mean of [`class_ap`] over classes with ground truth; 0 if none.
pub fn mean_ap(corpus: &[(PredictionSet, GroundTruth)], classes: usize, thr: f64) -> f64 {
    let per: Vec<f64> = (0..classes).filter_map(|c| class_ap(corpus, c, thr)).collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}
