use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::teacher::PseudoLabel;
use crate::types::{one_hot, AnnotatedInstance, BBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreDistribution {
    pub mean: f64,
    pub std_dev: f64,
}

impl Default for ScoreDistribution {
    fn default() -> Self {
        Self {
            mean: 0.9,
            std_dev: 0.05,
        }
    }
}

/// A detector with a known, fixed misclassification process.
///
/// Each ground truth of class `c` is detected with probability `recall[c]`;
/// a detection's class is drawn from row `c` of `confusion`.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    confusion: Vec<Vec<f64>>,
    recall: Vec<f64>,
    scores: Vec<ScoreDistribution>,
    /// Box jitter standard deviation as a fraction of box width/height.
    jitter: f64,
    rows: Vec<WeightedIndex<f64>>,
}

impl OracleDetector {
    pub fn new(confusion: Vec<Vec<f64>>, recall: Vec<f64>) -> Result<Self> {
        let c = confusion.len();
        if c < 2 {
            return Err(Error::param("confusion", "need at least 2 classes"));
        }
        if recall.len() != c {
            return Err(Error::Shape(format!("{} recall entries for {c} classes", recall.len())));
        }
        let mut rows = Vec::with_capacity(c);
        for (i, row) in confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != c || row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Shape(format!("confusion row {i} is not stochastic")));
            }
            rows.push(WeightedIndex::new(row).expect("stochastic row"));
        }
        if recall.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::param("recall", "entries must lie in [0, 1]"));
        }
        Ok(Self {
            confusion,
            recall,
            scores: vec![ScoreDistribution::default(); c],
            jitter: 0.0,
            rows,
        })
    }

    pub fn with_scores(mut self, scores: Vec<ScoreDistribution>) -> Result<Self> {
        if scores.len() != self.num_classes() || scores.iter().any(|s| !(s.std_dev >= 0.0)) {
            return Err(Error::param("scores", "need one distribution per class with std_dev >= 0"));
        }
        self.scores = scores;
        Ok(self)
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(Error::param("jitter", "must be >= 0"));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn confusion(&self) -> &[Vec<f64>] {
        &self.confusion
    }

    pub fn recall(&self) -> &[f64] {
        &self.recall
    }

    /// What a background-excluding relation estimate should converge to.
    ///
    /// Misses only add background counts, which are dropped on renormalisation,
    /// so a class that is ever detected converges to its confusion row; a class
    /// that is never detected keeps an empty row.
    pub fn effective_confusion(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .zip(&self.recall)
            .map(|(row, &r)| if r > 0.0 { row.clone() } else { vec![0.0; row.len()] })
            .collect()
    }

    /// Simulated detections for one image's ground truths.
    pub fn predict<R: Rng + ?Sized>(&self, gt: &[AnnotatedInstance], rng: &mut R) -> Vec<PseudoLabel> {
        let c = self.num_classes();
        let mut out = Vec::new();
        for inst in gt {
            let class = inst.dominant_class().min(c - 1);
            if !rng.random_bool(self.recall[class]) {
                continue;
            }
            let pred_class = self.rows[class].sample(rng);
            let bbox = self.jitter_box(inst.bbox, rng);
            let dist = self.scores[pred_class];
            let score = if dist.std_dev > 0.0 {
                Normal::new(dist.mean, dist.std_dev)
                    .expect("validated std_dev")
                    .sample(rng)
            } else {
                dist.mean
            }
            .clamp(0.0, 1.0);
            out.push(PseudoLabel {
                instance: AnnotatedInstance {
                    bbox,
                    label: one_hot(pred_class, c).expect("class in range"),
                    score,
                },
                score,
            });
        }
        out
    }

    fn jitter_box<R: Rng + ?Sized>(&self, b: BBox, rng: &mut R) -> BBox {
        if self.jitter == 0.0 {
            return b;
        }
        let noise = Normal::new(0.0, self.jitter).expect("validated jitter");
        let w = f64::from(b.w);
        let h = f64::from(b.h);
        let x = (f64::from(b.x) + noise.sample(rng) * w).round().max(0.0);
        let y = (f64::from(b.y) + noise.sample(rng) * h).round().max(0.0);
        let nw = (w + noise.sample(rng) * w).round().max(1.0);
        let nh = (h + noise.sample(rng) * h).round().max(1.0);
        BBox::new(x as u32, y as u32, nw as u32, nh as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts(class: usize, n: usize, c: usize) -> Vec<AnnotatedInstance> {
        (0..n)
            .map(|i| AnnotatedInstance::ground_truth(BBox::new(i as u32 * 10, 0, 8, 8), class, c).unwrap())
            .collect()
    }

    #[test]
    fn perfect_oracle_mirrors_ground_truth() {
        let det = OracleDetector::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gt = gts(0, 3, 2);
        gt.extend(gts(1, 2, 2));
        let preds = det.predict(&gt, &mut rng);
        assert_eq!(preds.len(), gt.len());
        for (p, g) in preds.iter().zip(&gt) {
            assert_eq!(p.instance.bbox, g.bbox);
            assert_eq!(p.instance.label, g.label);
            assert!((0.0..=1.0).contains(&p.score));
        }
    }

    #[test]
    fn zero_recall_detects_nothing() {
        let det = OracleDetector::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(det.predict(&gts(1, 50, 2), &mut rng).is_empty());
    }

    #[test]
    fn confusion_frequency_is_binomial() {
        let det = OracleDetector::new(vec![vec![0.8, 0.2], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let preds = det.predict(&gts(0, n, 2), &mut rng);
        let ones = preds.iter().filter(|p| p.class() == 1).count() as f64;
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        assert!((ones - 0.2 * n as f64).abs() < 3.0 * sd, "{ones}");
    }

    #[test]
    fn validation() {
        assert!(OracleDetector::new(vec![vec![0.5, 0.4], vec![0.0, 1.0]], vec![1.0, 1.0]).is_err());
        assert!(OracleDetector::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0]).is_err());
        assert!(OracleDetector::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.5]).is_err());
    }

    #[test]
    fn effective_confusion_drops_undetected_rows() {
        let det = OracleDetector::new(vec![vec![0.7, 0.3], vec![0.4, 0.6]], vec![0.5, 0.0]).unwrap();
        assert_eq!(det.effective_confusion(), vec![vec![0.7, 0.3], vec![0.0, 0.0]]);
    }
}
