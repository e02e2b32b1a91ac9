//! Inter-class loss weights and the weighted classification loss.
//!
//! Weights are built in three steps: a raw weight per sample from the
//! relation matrix ([`raw_weight`]), rescaling of the foreground weights so
//! their mean matches the background weight of 1 ([`normalize_foreground`]),
//! and a shrink toward 1 by `lambda_l` ([`regularize`]). Weights are constants
//! with respect to the logits.

use log::warn;

use crate::error::{Error, Result};
use crate::relation::ClassRelationMatrix;
use crate::types::argmax;

/// Floor on the diagonal when dividing by it.
pub const DIAGONAL_EPS: f64 = 1e-6;
/// Floor on probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_LAMBDA_L: f64 = 1.0;
pub const DEFAULT_LAMBDA_U: f64 = 1.0;
pub const DEFAULT_LAMBDA_D: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One classified proposal. `pred_logits` has `C + 1` entries, background last.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedSample {
    /// Distribution over the `C` foreground classes; ignored for background samples.
    pub gt_label: Vec<f64>,
    pub pred_logits: Vec<f64>,
    pub is_foreground: bool,
}

impl ClassifiedSample {
    pub fn foreground(gt_label: Vec<f64>, pred_logits: Vec<f64>) -> Self {
        Self {
            gt_label,
            pred_logits,
            is_foreground: true,
        }
    }

    pub fn background(num_classes: usize, pred_logits: Vec<f64>) -> Self {
        Self {
            gt_label: vec![0.0; num_classes],
            pred_logits,
            is_foreground: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pred_logits.len().saturating_sub(1)
    }

    /// Argmax over all logits, background included.
    pub fn pred_class(&self) -> usize {
        argmax(&self.pred_logits)
    }

    /// Dominant ground-truth class and most likely foreground prediction,
    /// the pair the relation matrix is indexed with.
    pub fn weight_key(&self) -> (usize, usize) {
        let c = self.num_classes();
        (argmax(&self.gt_label), argmax(&self.pred_logits[..c]))
    }

    /// Target distribution over `C + 1` outputs.
    fn target(&self) -> Vec<f64> {
        let c = self.num_classes();
        if self.is_foreground {
            let mut t = self.gt_label.clone();
            t.push(0.0);
            t
        } else {
            let mut t = vec![0.0; c + 1];
            t[c] = 1.0;
            t
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pred_logits.len() < 2 {
            return Err(Error::Shape("need at least one foreground logit".into()));
        }
        if self.gt_label.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "label has {} entries for {} logits",
                self.gt_label.len(),
                self.pred_logits.len()
            )));
        }
        if self.pred_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("pred_logits", "non-finite logit"));
        }
        Ok(())
    }
}

/// `sqrt(1 - R[c][c])` for a correct prediction, `sqrt(R[c][x] / max(R[c][c], eps))` otherwise.
pub fn raw_weight(m: &ClassRelationMatrix, gt_class: usize, pred_class: usize) -> f64 {
    if gt_class == pred_class {
        (1.0 - m.get(gt_class, gt_class)).max(0.0).sqrt()
    } else {
        (m.get(gt_class, pred_class) / m.get(gt_class, gt_class).max(DIAGONAL_EPS)).sqrt()
    }
}

/// Divides foreground weights by their mean and sets background weights to 1.
/// A zero foreground mean resets every foreground weight to 1.
pub fn normalize_foreground(weights: &WeightVector, foreground: &[bool]) -> Result<WeightVector> {
    if weights.len() != foreground.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} mask entries",
            weights.len(),
            foreground.len()
        )));
    }
    let fg: Vec<f64> = weights
        .0
        .iter()
        .zip(foreground)
        .filter(|(_, &f)| f)
        .map(|(&w, _)| w)
        .collect();
    let mean = if fg.is_empty() {
        0.0
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    if !fg.is_empty() && mean <= 0.0 {
        warn!("foreground weights have zero mean; using uniform weights");
    }
    Ok(WeightVector(
        weights
            .0
            .iter()
            .zip(foreground)
            .map(|(&w, &f)| match (f, mean > 0.0) {
                (false, _) => 1.0,
                (true, true) => w / mean,
                (true, false) => 1.0,
            })
            .collect(),
    ))
}

/// `(w + lambda_l) / (1 + lambda_l)` element-wise.
pub fn regularize(weights: &WeightVector, lambda_l: f64) -> Result<WeightVector> {
    if !(lambda_l >= 0.0 && lambda_l.is_finite()) {
        return Err(Error::param("lambda_l", format!("{lambda_l} must be >= 0")));
    }
    Ok(WeightVector(
        weights
            .0
            .iter()
            .map(|&w| (w + lambda_l) / (1.0 + lambda_l))
            .collect(),
    ))
}

/// Full weight pipeline for a batch of samples.
pub fn icl_weights(
    m: &ClassRelationMatrix,
    samples: &[ClassifiedSample],
    lambda_l: f64,
) -> Result<WeightVector> {
    let mut raw = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        if s.num_classes() != m.num_classes() {
            return Err(Error::Shape(format!(
                "sample has {} classes, matrix has {}",
                s.num_classes(),
                m.num_classes()
            )));
        }
        if s.is_foreground {
            let (gt, pred) = s.weight_key();
            raw.push(raw_weight(m, gt, pred));
        } else {
            raw.push(1.0);
        }
        mask.push(s.is_foreground);
    }
    let normalized = normalize_foreground(&WeightVector(raw), &mask)?;
    regularize(&normalized, lambda_l)
}

/// One row of the per-cell weight table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightCell {
    pub gt_class: usize,
    pub pred_class: usize,
    pub raw: f64,
    pub normalized: f64,
    pub weight: f64,
}

/// Weights for every `(gt, pred)` cell, normalising over the `C×C` cells as one
/// uniform foreground batch.
pub fn weight_table(m: &ClassRelationMatrix, lambda_l: f64) -> Result<Vec<WeightCell>> {
    let c = m.num_classes();
    let cells: Vec<(usize, usize)> = (0..c).flat_map(|g| (0..c).map(move |p| (g, p))).collect();
    let raw = WeightVector(cells.iter().map(|&(g, p)| raw_weight(m, g, p)).collect());
    let normalized = normalize_foreground(&raw, &vec![true; cells.len()])?;
    let weights = regularize(&normalized, lambda_l)?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, &(g, p))| WeightCell {
            gt_class: g,
            pred_class: p,
            raw: raw.0[i],
            normalized: normalized.0[i],
            weight: weights.0[i],
        })
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Soft-label cross-entropy `-sum_c t_c log p_c` with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    -target
        .iter()
        .zip(probs)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

fn check_batch(samples: &[ClassifiedSample], weights: &WeightVector) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::param("samples", "empty batch"));
    }
    if samples.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} samples for {} weights",
            samples.len(),
            weights.len()
        )));
    }
    samples.iter().try_for_each(ClassifiedSample::validate)
}

/// `(1/N) sum_i w_i * CE(target_i, softmax(logits_i))`.
pub fn weighted_cls_loss(samples: &[ClassifiedSample], weights: &WeightVector) -> Result<f64> {
    check_batch(samples, weights)?;
    let total: f64 = samples
        .iter()
        .zip(&weights.0)
        .map(|(s, &w)| w * cross_entropy(&s.target(), &softmax(&s.pred_logits)))
        .sum();
    Ok(total / samples.len() as f64)
}

/// Gradient of [`weighted_cls_loss`] with respect to every logit.
pub fn weighted_cls_loss_grad(
    samples: &[ClassifiedSample],
    weights: &WeightVector,
) -> Result<Vec<Vec<f64>>> {
    check_batch(samples, weights)?;
    let n = samples.len() as f64;
    Ok(samples
        .iter()
        .zip(&weights.0)
        .map(|(s, &w)| {
            let t = s.target();
            let mass: f64 = t.iter().sum();
            softmax(&s.pred_logits)
                .iter()
                .zip(&t)
                .map(|(&p, &tk)| w / n * (p * mass - tk))
                .collect()
        })
        .collect())
}

/// Unsupervised term: objectness plus weighted classification over pseudo-labels.
/// There is no box-regression term.
#[derive(Debug, Clone, Default)]
pub struct UnsupervisedBatch {
    pub samples: Vec<ClassifiedSample>,
    pub weights: WeightVector,
    /// Objectness loss supplied by the detector; zero for classification-only runs.
    pub objectness: f64,
}

pub fn unsup_loss(batch: &UnsupervisedBatch) -> Result<f64> {
    if batch.samples.is_empty() {
        return Ok(batch.objectness);
    }
    Ok(batch.objectness + weighted_cls_loss(&batch.samples, &batch.weights)?)
}

/// `sup + lambda_u * unsup + lambda_d * dis`.
pub fn total_loss(sup: f64, unsup: f64, dis: f64, lambda_u: f64, lambda_d: f64) -> f64 {
    sup + lambda_u * unsup + lambda_d * dis
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn with_diag(d: f64, off: f64) -> ClassRelationMatrix {
        ClassRelationMatrix::from_rows(&[vec![d, 1.0 - d], vec![off, 1.0 - off]]).unwrap()
    }

    #[test]
    fn raw_weight_cases() {
        assert_eq!(raw_weight(&ClassRelationMatrix::identity(2).unwrap(), 0, 0), 0.0);
        assert!(close(raw_weight(&with_diag(0.64, 0.5), 0, 0), 0.6));
        let m = ClassRelationMatrix::from_rows(&[
            vec![0.36, 0.09, 0.55],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!(close(raw_weight(&m, 0, 1), 0.5));
    }

    #[test]
    fn raw_weight_floors_zero_diagonal() {
        let m = with_diag(0.0, 0.5);
        let w = raw_weight(&m, 0, 1);
        assert!(w.is_finite());
        assert!(close(w, (1.0 / DIAGONAL_EPS).sqrt()));
    }

    #[test]
    fn normalize_foreground_cases() {
        let mask = [true, false, true];
        let out = normalize_foreground(&WeightVector(vec![0.5, 0.2, 1.5]), &mask).unwrap();
        assert_eq!(out.0, vec![0.5, 1.0, 1.5]);
        let out = normalize_foreground(&WeightVector(vec![1.0, 7.0, 3.0]), &mask).unwrap();
        assert_eq!(out.0, vec![0.5, 1.0, 1.5]);
        let out = normalize_foreground(&WeightVector(vec![0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(out.0, vec![1.0, 1.0]);
        assert!(normalize_foreground(&WeightVector(vec![1.0]), &[true, true]).is_err());
    }

    #[test]
    fn regularize_cases() {
        let out = regularize(&WeightVector(vec![1.0, 0.0, 3.0]), 1.0).unwrap();
        assert_eq!(out.0, vec![1.0, 0.5, 2.0]);
        assert!(regularize(&WeightVector(vec![1.0]), -0.5).is_err());
    }

    #[test]
    fn loss_of_perfect_prediction_is_zero() {
        let s = ClassifiedSample::foreground(vec![1.0, 0.0], vec![60.0, 0.0, 0.0]);
        let loss = weighted_cls_loss(&[s], &WeightVector::ones(1)).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn loss_is_a_mean() {
        let s = ClassifiedSample::foreground(vec![0.3, 0.7], vec![0.4, -1.0, 2.0]);
        let single = weighted_cls_loss(&[s.clone()], &WeightVector::ones(1)).unwrap();
        let pair = weighted_cls_loss(&[s.clone(), s], &WeightVector::ones(2)).unwrap();
        assert!(close(single, pair));
    }

    #[test]
    fn loss_of_uniform_prediction() {
        // background logit pushed far down leaves p = [0.5, 0.5, ~0]
        let s = ClassifiedSample::foreground(vec![1.0, 0.0], vec![0.0, 0.0, -60.0]);
        let loss = weighted_cls_loss(&[s], &WeightVector(vec![2.0])).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn background_samples_target_the_last_logit() {
        let s = ClassifiedSample::background(2, vec![0.0, 0.0, 0.0]);
        let loss = weighted_cls_loss(&[s], &WeightVector::ones(1)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_errors() {
        assert!(weighted_cls_loss(&[], &WeightVector::ones(0)).is_err());
        let s = ClassifiedSample::foreground(vec![1.0, 0.0], vec![f64::NAN, 0.0, 0.0]);
        assert!(weighted_cls_loss(&[s], &WeightVector::ones(1)).is_err());
        let s = ClassifiedSample::foreground(vec![1.0, 0.0], vec![0.0, 0.0, 0.0]);
        assert!(weighted_cls_loss(&[s], &WeightVector::ones(2)).is_err());
    }

    #[test]
    fn unsup_and_total() {
        assert_eq!(unsup_loss(&UnsupervisedBatch::default()).unwrap(), 0.0);
        let s = ClassifiedSample::foreground(vec![1.0, 0.0], vec![0.0, 0.0, -60.0]);
        let batch = UnsupervisedBatch {
            samples: vec![s.clone()],
            weights: WeightVector::ones(1),
            objectness: 0.0,
        };
        let expected = weighted_cls_loss(&[s], &WeightVector::ones(1)).unwrap();
        assert_eq!(unsup_loss(&batch).unwrap(), expected);
        assert!(close(unsup_loss(&batch).unwrap(), std::f64::consts::LN_2));

        assert!(close(total_loss(1.0, 2.0, 3.0, DEFAULT_LAMBDA_U, DEFAULT_LAMBDA_D), 3.3));
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 0.1), 0.0);
    }

    #[test]
    fn icl_weights_pipeline() {
        let m = ClassRelationMatrix::from_rows(&[vec![0.64, 0.36], vec![0.09, 0.91]]).unwrap();
        let samples = vec![
            // correct class 0: sqrt(0.36) = 0.6
            ClassifiedSample::foreground(vec![1.0, 0.0], vec![2.0, 0.0, 0.0]),
            // class 0 read as 1: sqrt(0.36 / 0.64) = 0.75
            ClassifiedSample::foreground(vec![1.0, 0.0], vec![0.0, 2.0, 0.0]),
            ClassifiedSample::background(2, vec![0.0, 0.0, 3.0]),
        ];
        let w = icl_weights(&m, &samples, 1.0).unwrap();
        let mean = (0.6 + 0.75) / 2.0;
        let expected = [(0.6 / mean + 1.0) / 2.0, (0.75 / mean + 1.0) / 2.0, 1.0];
        for (a, e) in w.0.iter().zip(expected) {
            assert!(close(*a, e));
        }
    }

    #[test]
    fn identity_weight_table_is_uniform() {
        let table = weight_table(&ClassRelationMatrix::identity(3).unwrap(), 1.0).unwrap();
        assert_eq!(table.len(), 9);
        for cell in table {
            assert_eq!(cell.raw, 0.0);
            assert_eq!(cell.normalized, 1.0);
            assert_eq!(cell.weight, 1.0);
        }
    }

    proptest! {
        #[test]
        fn normalized_foreground_mean_is_one(
            ws in prop::collection::vec(0.0f64..10.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mask: Vec<bool> = (0..ws.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            let pre: Vec<f64> = ws.iter().zip(&mask).filter(|(_, &f)| f).map(|(&w, _)| w).collect();
            prop_assume!(pre.iter().sum::<f64>() > 1e-9);
            let out = normalize_foreground(&WeightVector(ws.clone()), &mask).unwrap();
            let fg: Vec<f64> = out.0.iter().zip(&mask).filter(|(_, &f)| f).map(|(&w, _)| w).collect();
            let mean = fg.iter().sum::<f64>() / fg.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            for (w, f) in out.0.iter().zip(&mask) {
                if !f { prop_assert_eq!(*w, 1.0); }
            }
        }

        #[test]
        fn regularize_is_bounded_and_monotone(
            a in 0.0f64..100.0,
            b in 0.0f64..100.0,
            lambda in 0.0f64..10.0,
        ) {
            let out = regularize(&WeightVector(vec![a, b]), lambda).unwrap();
            prop_assert!(out.0[0] >= lambda / (1.0 + lambda) - 1e-15);
            if a < b { prop_assert!(out.0[0] < out.0[1]); }
        }

        #[test]
        fn misclassification_weight_grows_with_confusion(
            diag in 0.05f64..0.9,
            split in 0.0f64..1.0,
        ) {
            let rest = 1.0 - diag;
            let m = ClassRelationMatrix::from_rows(&[
                vec![diag, rest * split, rest * (1.0 - split)],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ]).unwrap();
            let (w1, w2) = (raw_weight(&m, 0, 1), raw_weight(&m, 0, 2));
            if m.get(0, 1) > m.get(0, 2) { prop_assert!(w1 >= w2); }
            if m.get(0, 1) < m.get(0, 2) { prop_assert!(w1 <= w2); }
        }

        #[test]
        fn loss_scales_linearly_with_weights(
            logits in prop::collection::vec(-5.0f64..5.0, 4),
            k in 0.0f64..10.0,
        ) {
            let s = ClassifiedSample::foreground(vec![0.2, 0.3, 0.5], logits);
            let base = weighted_cls_loss(&[s.clone()], &WeightVector(vec![0.7])).unwrap();
            let scaled = weighted_cls_loss(&[s], &WeightVector(vec![0.7 * k])).unwrap();
            prop_assert!((scaled - k * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
        }
    }
}
