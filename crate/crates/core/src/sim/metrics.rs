use serde::Serialize;

use crate::error::{Error, Result};
use crate::teacher::PseudoLabel;
use crate::types::AnnotatedInstance;

pub const AP_IOU_THRESHOLD: f64 = 0.5;

/// Per-class AP plus the mean and spread over classes that have ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` for classes with no ground-truth instance.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Population standard deviation of the per-class APs.
    pub sigma: f64,
}

impl MetricsReport {
    pub fn from_aps(per_class_ap: Vec<Option<f64>>) -> Self {
        let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let (map, sigma) = mean_and_spread(&aps);
        Self {
            per_class_ap,
            map,
            sigma,
        }
    }
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_and_spread(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// All-points interpolated AP: area under the precision envelope of the
/// ranked detections. `detections` are `(score, is_true_positive)`.
/// Returns `None` when there are no positives to find.
pub fn average_precision(detections: &[(f64, bool)], num_positives: usize) -> Option<f64> {
    if num_positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0).then(a.cmp(&b)));

    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if detections[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Detection AP at IoU 0.5 over a stream of images.
///
/// `gt_stream[i]` and `pred_stream[i]` belong to the same image. Detections
/// are ranked by score across the whole stream; each claims the best-overlapping
/// still-unmatched ground truth of its class in its image.
pub fn compute_metrics(
    gt_stream: &[Vec<AnnotatedInstance>],
    pred_stream: &[Vec<PseudoLabel>],
) -> Result<MetricsReport> {
    if gt_stream.len() != pred_stream.len() {
        return Err(Error::Shape(format!(
            "{} ground-truth images for {} prediction images",
            gt_stream.len(),
            pred_stream.len()
        )));
    }
    let num_classes = gt_stream
        .iter()
        .flatten()
        .map(AnnotatedInstance::num_classes)
        .next()
        .ok_or_else(|| Error::param("gt_stream", "no ground-truth instances"))?;

    let mut per_class_ap = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut num_gt = 0;
        let mut detections = Vec::new();
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, preds) in pred_stream.iter().enumerate() {
            for (p, pl) in preds.iter().enumerate() {
                if pl.class() == class {
                    ranked.push((pl.score, img, p));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut claimed: Vec<Vec<bool>> = gt_stream.iter().map(|g| vec![false; g.len()]).collect();
        for gts in gt_stream {
            num_gt += gts.iter().filter(|g| g.dominant_class() == class).count();
        }
        for (score, img, p) in ranked {
            let bbox = pred_stream[img][p].instance.bbox;
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gt_stream[img].iter().enumerate() {
                if claimed[img][g] || gt.dominant_class() != class {
                    continue;
                }
                let iou = gt.bbox.iou(&bbox);
                if iou >= AP_IOU_THRESHOLD && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                claimed[img][g] = true;
            }
            detections.push((score, best.is_some()));
        }
        per_class_ap.push(average_precision(&detections, num_gt));
    }
    Ok(MetricsReport::from_aps(per_class_ap))
}
