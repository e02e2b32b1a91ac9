use rand::Rng;

use super::matching::{match_predictions, DEFAULT_IOU_THRESHOLD};
use super::metrics::compute_metrics;
use super::oracle::OracleDetector;
use crate::error::{Error, Result};
use crate::relation::{BatchConfusion, ClassRelationMatrix};
use crate::types::{AnnotatedInstance, BBox};

/// Ground truths are laid out on a grid with this many cells per image.
const INSTANCES_PER_IMAGE: usize = 64;
const GRID: usize = 8;
const CELL: u32 = 32;
const BOX_SIDE: u32 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub batch: usize,
    pub map: f64,
    pub sigma: f64,
    pub icrm_error: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub matrix: ClassRelationMatrix,
    /// Largest entry-wise gap between the estimate and the oracle's effective confusion.
    pub error: f64,
    pub history: Vec<BatchRecord>,
}

/// Synthetic ground truths with uniformly drawn classes on non-overlapping boxes,
/// split into images of at most 64 instances.
pub fn synthetic_ground_truth<R: Rng + ?Sized>(
    count: usize,
    num_classes: usize,
    rng: &mut R,
) -> Vec<Vec<AnnotatedInstance>> {
    let mut images = Vec::new();
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(INSTANCES_PER_IMAGE);
        let image = (0..n)
            .map(|i| {
                let (row, col) = ((i / GRID) as u32, (i % GRID) as u32);
                let bbox = BBox::new(col * CELL + 4, row * CELL + 4, BOX_SIDE, BOX_SIDE);
                let class = rng.random_range(0..num_classes);
                AnnotatedInstance::ground_truth(bbox, class, num_classes).expect("class in range")
            })
            .collect();
        images.push(image);
        remaining -= n;
    }
    images
}

/// Streams oracle detections through tally, normalisation and EMA for
/// `batches` batches of `batch_size` ground truths each.
pub fn run_convergence_experiment<R: Rng + ?Sized>(
    det: &OracleDetector,
    batches: usize,
    batch_size: usize,
    momentum: f64,
    rng: &mut R,
) -> Result<ConvergenceRun> {
    if batches == 0 || batch_size == 0 {
        return Err(Error::param("batches", "need at least one non-empty batch"));
    }
    let c = det.num_classes();
    let target = det.effective_confusion();
    let mut matrix = ClassRelationMatrix::new(c)?;
    let mut history = Vec::with_capacity(batches);
    for batch in 0..batches {
        let gt = synthetic_ground_truth(batch_size, c, rng);
        let preds: Vec<_> = gt.iter().map(|g| det.predict(g, rng)).collect();
        let mut tally = BatchConfusion::new(c)?;
        for (g, p) in gt.iter().zip(&preds) {
            tally.accumulate(&match_predictions(g, p, DEFAULT_IOU_THRESHOLD))?;
        }
        matrix.ema_update(&tally.normalize(), momentum)?;
        let report = compute_metrics(&gt, &preds)?;
        history.push(BatchRecord {
            batch,
            map: report.map,
            sigma: report.sigma,
            icrm_error: matrix.max_abs_diff(&target),
        });
    }
    let error = matrix.max_abs_diff(&target);
    Ok(ConvergenceRun {
        matrix,
        error,
        history,
    })
}

/// Default oracle confusion for `c` classes: diagonal falling linearly from
/// 0.8 to 0.7, the remainder spread evenly over the other classes.
pub fn default_confusion(c: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|i| {
            let diag = if c > 1 { 0.8 - 0.1 * i as f64 / (c - 1) as f64 } else { 1.0 };
            let off = (1.0 - diag) / (c - 1).max(1) as f64;
            (0..c).map(|j| if i == j { diag } else { off }).collect()
        })
        .collect()
}
