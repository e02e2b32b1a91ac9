use crate::relation::MatchedPair;
use crate::teacher::PseudoLabel;
use crate::types::AnnotatedInstance;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one matching by descending IoU.
///
/// Returns one pair per ground truth, in ground-truth order: the matched
/// prediction's class, or background when nothing reaches `iou_threshold`.
/// Equal IoUs are resolved by lower ground-truth index, then lower prediction index.
pub fn match_predictions(
    gt: &[AnnotatedInstance],
    preds: &[PseudoLabel],
    iou_threshold: f64,
) -> Vec<MatchedPair> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gi) in gt.iter().enumerate() {
        for (p, pl) in preds.iter().enumerate() {
            let iou = gi.bbox.iou(&pl.instance.bbox);
            if iou >= iou_threshold && iou > 0.0 {
                candidates.push((iou, g, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_match: Vec<Option<usize>> = vec![None; gt.len()];
    let mut pred_used = vec![false; preds.len()];
    for (_, g, p) in candidates {
        if gt_match[g].is_none() && !pred_used[p] {
            gt_match[g] = Some(p);
            pred_used[p] = true;
        }
    }
    gt.iter()
        .zip(gt_match)
        .map(|(g, m)| match m {
            Some(p) => MatchedPair::new(g.dominant_class(), preds[p].class()),
            None => MatchedPair::background(g.dominant_class()),
        })
        .collect()
}
