//! Training objectives: mask, classification and the two student-teacher
//! consistency terms.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Smoothing constant of the dice loss.
const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub q: f64,
    pub f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::indoor_scans()
    }
}

impl LossWeights {
    /// `(1.0, 1.0, 0.5, 0.5, 0.5)`, the setting used for room-scale scans.
    pub fn indoor_scans() -> Self {
        LossWeights {
            bce: 1.0,
            dice: 1.0,
            cls: 0.5,
            q: 0.5,
            f: 0.5,
        }
    }

    /// `(5.0, 1.0, 2.0, 2.0, 2.0)`, the setting used for large office areas.
    pub fn office_areas() -> Self {
        LossWeights {
            bce: 5.0,
            dice: 1.0,
            cls: 2.0,
            q: 2.0,
            f: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.bce, self.dice, self.cls, self.q, self.f];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Weights(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Scalar value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub q: f64,
    pub f: f64,
    pub total: f64,
}

/// Tape handles of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub bce: Var,
    pub dice: Var,
    pub cls: Var,
    pub q: Var,
    pub f: Var,
}

fn constant_mask<T: Real>(tape: &mut Tape<T>, masks: &[Vec<bool>], cols: usize) -> Result<Var, TensorError> {
    let data: Vec<T> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&b| if b { T::one() } else { T::zero() }))
        .collect();
    Ok(tape.constant(Tensor::new(vec![masks.len(), cols], data)?))
}

/// Mean binary cross-entropy of `K x N` mask logits against binary
/// targets, evaluated as `softplus(x) - x * t`.
pub fn bce_mask_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[Vec<bool>]) -> Result<Var, LossError> {
    let cols = tape.shape(logits)[1];
    let t = constant_mask(tape, target, cols)?;
    let sp = tape.softplus(logits);
    let xt = tape.mul(logits, t)?;
    let per = tape.sub(sp, xt)?;
    Ok(tape.mean(per)?)
}

/// Mean over rows of `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &[Vec<bool>]) -> Result<Var, LossError> {
    use crate::tensor::{Axis, ReduceKind};
    let cols = tape.shape(probs)[1];
    let t = constant_mask(tape, target, cols)?;
    let pt = tape.mul(probs, t)?;
    let inter = tape.reduce(ReduceKind::Sum, pt, Axis::Dim(1))?;
    let numer = tape.scale(inter, T::lit(2.0));
    let numer = tape.add_scalar(numer, T::lit(DICE_SMOOTH));
    let psum = tape.reduce(ReduceKind::Sum, probs, Axis::Dim(1))?;
    let tsum = tape.reduce(ReduceKind::Sum, t, Axis::Dim(1))?;
    let denom = tape.add(psum, tsum)?;
    let denom = tape.add_scalar(denom, T::lit(DICE_SMOOTH));
    let ratio = tape.div(numer, denom)?;
    let loss = tape.scale(ratio, -T::one());
    let loss = tape.add_scalar(loss, T::one());
    Ok(tape.mean(loss)?)
}

/// Per-query class targets: the matched instance's class, or the
/// no-object index `num_classes` for unmatched queries.
pub fn class_targets(query_to_instance: &[Option<usize>], instance_classes: &[usize], num_classes: usize) -> Vec<usize> {
    query_to_instance
        .iter()
        .map(|m| m.map_or(num_classes, |k| instance_classes[k]))
        .collect()
}

/// Mean cross-entropy of `N_Q x (C + 1)` logits against `targets`.
pub fn classification_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var, LossError> {
    let (rows, cols) = tape.value(logits).dims2()?;
    if targets.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "classification_loss",
            lhs: vec![rows],
            rhs: vec![targets.len()],
        }
        .into());
    }
    let logp = tape.log_softmax(logits)?;
    let mut onehot = Tensor::<T>::zeros(&[rows, cols]);
    for (r, &c) in targets.iter().enumerate() {
        if c >= cols {
            return Err(TensorError::IndexOutOfRange { index: c, len: cols }.into());
        }
        onehot.data_mut()[r * cols + c] = -T::one() / T::lit(rows as f64);
    }
    let w = tape.constant(onehot);
    let picked = tape.mul(logp, w)?;
    Ok(tape.sum(picked))
}

/// Index-wise L1 distance between student and teacher content queries,
/// averaged over all entries. The teacher side is a constant.
pub fn query_consistency<T: Real>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<T>) -> Result<Var, LossError> {
    if tape.shape(student) != teacher.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "query_consistency",
            lhs: tape.shape(student).to_vec(),
            rhs: teacher.shape().to_vec(),
        }
        .into());
    }
    let t = tape.constant(teacher.clone());
    let d = tape.sub(student, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a)?)
}

/// Mean of the feature rows selected by `mask`, with the selection size.
/// `None` when nothing is selected.
pub fn masked_feature_mean<T: Real>(features: &Tensor<T>, mask: &[bool]) -> Option<(Vec<T>, usize)> {
    let cols = *features.shape().last()?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let mut mean = vec![T::zero(); cols];
    for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (acc, &v) in mean.iter_mut().zip(features.row(j)) {
            *acc += v;
        }
    }
    let n = T::lit(count as f64);
    mean.iter_mut().for_each(|v| *v = *v / n);
    Some((mean, count))
}

/// Squared L2 distance between teacher and student masked-feature means,
/// averaged over instances. Instances whose mask is empty on either
/// side are skipped; the second value counts them. Gradients reach the
/// student features only, masks act as fixed selectors.
pub fn masked_feature_consistency<T: Real>(
    tape: &mut Tape<T>,
    teacher_features: &Tensor<T>,
    teacher_masks: &[Vec<bool>],
    student_features: Var,
    student_masks: &[Vec<bool>],
) -> Result<(Var, usize), LossError> {
    let (n, c) = tape.value(student_features).dims2()?;
    if teacher_features.shape() != [n, c] {
        return Err(TensorError::ShapeMismatch {
            op: "masked_feature_consistency",
            lhs: vec![n, c],
            rhs: teacher_features.shape().to_vec(),
        }
        .into());
    }
    let mut selector = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = 0;
    for (tm, sm) in teacher_masks.iter().zip(student_masks) {
        let Some((tmean, _)) = masked_feature_mean(teacher_features, tm) else {
            skipped += 1;
            continue;
        };
        let count = sm.iter().filter(|&&m| m).count();
        if count == 0 {
            skipped += 1;
            continue;
        }
        let w = T::one() / T::lit(count as f64);
        selector.extend(sm.iter().map(|&m| if m { w } else { T::zero() }));
        targets.extend(tmean);
    }
    let kept = targets.len() / c.max(1);
    if kept == 0 {
        if !teacher_masks.is_empty() {
            log::warn!("masked-feature consistency: every instance mask is empty, term is zero");
        }
        return Ok((tape.constant(Tensor::scalar(T::zero())), skipped));
    }
    if skipped > 0 {
        log::debug!("masked-feature consistency skipped {skipped} empty instance(s)");
    }
    let sel = tape.constant(Tensor::new(vec![kept, n], selector)?);
    let means = tape.matmul(sel, student_features)?;
    let tgt = tape.constant(Tensor::new(vec![kept, c], targets)?);
    let diff = tape.sub(means, tgt)?;
    let sq = tape.reduce(crate::tensor::ReduceKind::SquaredL2, diff, crate::tensor::Axis::All)?;
    Ok((tape.scale(sq, T::one() / T::lit(kept as f64)), skipped))
}

/// Weighted sum of all terms. Fails, naming the term, if any is not
/// finite.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossReport), LossError> {
    let terms = [
        ("bce", parts.bce, weights.bce),
        ("dice", parts.dice, weights.dice),
        ("cls", parts.cls, weights.cls),
        ("q", parts.q, weights.q),
        ("f", parts.f, weights.f),
    ];
    let mut values = [0.0; 5];
    for (slot, (term, var, _)) in values.iter_mut().zip(&terms) {
        let value = tape.value(*var).item()?.as_f64();
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
        *slot = value;
    }
    let mut total = None;
    for (_, var, w) in terms {
        let scaled = tape.scale(var, T::lit(w));
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let report = LossReport {
        bce: values[0],
        dice: values[1],
        cls: values[2],
        q: values[3],
        f: values[4],
        total: weights.bce * values[0]
            + weights.dice * values[1]
            + weights.cls * values[2]
            + weights.q * values[3]
            + weights.f * values[4],
    };
    Ok((total.expect("five terms"), report))
}
