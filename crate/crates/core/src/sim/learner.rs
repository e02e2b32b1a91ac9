//! Training stand-in for the detector: a two-layer softmax classifier on
//! Gaussian-cluster "instances" from an imbalanced source stream and a shifted
//! target stream, trained with burn-in, teacher EMA, thresholded pseudo-labels,
//! per-domain relation matrices and (optionally) inter-class loss weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::metrics::{average_precision, MetricsReport};
use crate::error::{Error, Result};
use crate::loss::{
    icl_weights, total_loss, unsup_loss, weighted_cls_loss, weighted_cls_loss_grad,
    ClassifiedSample, UnsupervisedBatch, WeightVector,
};
use crate::relation::{BatchConfusion, ClassRelationMatrix, MatchedPair};
use crate::teacher::{
    burn_in_copy, ema_params, filter_pseudo_labels, ParameterVector, Phase, Scored,
    TrainingSchedule,
};
use crate::types::{argmax, one_hot};

const INPUT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSimConfig {
    /// Foreground classes; the model has one extra background output.
    pub num_classes: usize,
    /// Frequency ratio between the most and least common foreground class.
    pub imbalance: f64,
    pub background_fraction: f64,
    pub cluster_std: f64,
    /// Offset of every target cluster along the y axis.
    pub domain_shift: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: TrainingSchedule,
    pub alpha: f64,
    pub tau: f64,
    pub icrm_momentum: f64,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    pub use_icl: bool,
    pub eval_every: u64,
    pub eval_size: usize,
}

impl Default for TrainSimConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            imbalance: 10.0,
            background_fraction: 0.2,
            cluster_std: 0.8,
            domain_shift: 0.3,
            hidden: 16,
            learning_rate: 0.1,
            batch_size: 32,
            schedule: TrainingSchedule::default(),
            alpha: crate::teacher::DEFAULT_ALPHA,
            tau: crate::teacher::DEFAULT_TAU,
            icrm_momentum: crate::relation::DEFAULT_MOMENTUM,
            lambda_l: crate::loss::DEFAULT_LAMBDA_L,
            lambda_u: crate::loss::DEFAULT_LAMBDA_U,
            lambda_d: crate::loss::DEFAULT_LAMBDA_D,
            use_icl: true,
            eval_every: 1000,
            eval_size: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub phase: Phase,
    pub iteration: u64,
    pub map: f64,
    pub sigma: f64,
    pub icrm_error: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub records: Vec<SimRecord>,
    /// Target-domain accuracy per foreground class of the final model.
    pub per_class_accuracy: Vec<f64>,
    /// Accuracy on the least frequent foreground class.
    pub minority_accuracy: f64,
    pub report: MetricsReport,
    pub source_icrm: ClassRelationMatrix,
    pub target_icrm: ClassRelationMatrix,
    pub teacher: Option<ParameterVector>,
    pub student: ParameterVector,
}

/// Labelled Gaussian clusters; the last class is background.
#[derive(Debug, Clone)]
struct ClusterStream {
    means: Vec<[f64; 2]>,
    classes: WeightedIndex<f64>,
    noise: Normal<f64>,
}

impl ClusterStream {
    fn new(cfg: &TrainSimConfig, shift: f64) -> Result<Self> {
        let c = cfg.num_classes;
        let mut means = Vec::with_capacity(c + 1);
        for k in 0..c {
            let angle = std::f64::consts::TAU * k as f64 / c as f64;
            means.push([angle.cos(), angle.sin() + shift]);
        }
        means.push([0.0, 2.5 + shift]);
        let mut probs: Vec<f64> = (0..c)
            .map(|k| cfg.imbalance.powf(-(k as f64) / (c - 1).max(1) as f64))
            .collect();
        let fg_total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p *= (1.0 - cfg.background_fraction) / fg_total;
        }
        probs.push(cfg.background_fraction);
        Ok(Self {
            means,
            classes: WeightedIndex::new(&probs)
                .map_err(|e| Error::param("background_fraction", e.to_string()))?,
            noise: Normal::new(0.0, cfg.cluster_std)
                .map_err(|e| Error::param("cluster_std", e.to_string()))?,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 2], usize) {
        let class = self.classes.sample(rng);
        let m = self.means[class];
        ([m[0] + self.noise.sample(rng), m[1] + self.noise.sample(rng)], class)
    }

    fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<([f64; 2], usize)> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// `INPUT_DIM -> hidden (tanh) -> outputs` with flat parameters
/// `[w1 (hidden x in), b1, w2 (out x hidden), b2]`.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    hidden: usize,
    outputs: usize,
}

impl Mlp {
    fn num_params(&self) -> usize {
        self.hidden * INPUT_DIM + self.hidden + self.outputs * self.hidden + self.outputs
    }

    fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let mut p = vec![0.0; self.num_params()];
        let (w1, rest) = p.split_at_mut(self.hidden * INPUT_DIM);
        let (_, rest) = rest.split_at_mut(self.hidden);
        let (w2, _) = rest.split_at_mut(self.outputs * self.hidden);
        w1.iter_mut().chain(w2.iter_mut()).for_each(|w| *w = normal.sample(rng));
        p
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = p.split_at(self.hidden * INPUT_DIM);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.outputs * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, p: &[f64], x: &[f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split(p);
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| (w1[j * INPUT_DIM] * x[0] + w1[j * INPUT_DIM + 1] * x[1] + b1[j]).tanh())
            .collect();
        let z = (0..self.outputs)
            .map(|k| b2[k] + (0..self.hidden).map(|j| w2[k * self.hidden + j] * h[j]).sum::<f64>())
            .collect();
        (h, z)
    }

    fn logits(&self, p: &[f64], x: &[f64; 2]) -> Vec<f64> {
        self.forward(p, x).1
    }

    /// Adds the parameter gradient for one input given `dL/dz` into `grad`.
    fn backward(&self, p: &[f64], x: &[f64; 2], h: &[f64], dz: &[f64], grad: &mut [f64]) {
        let (_, _, w2, _) = self.split(p);
        let o_b1 = self.hidden * INPUT_DIM;
        let o_w2 = o_b1 + self.hidden;
        let o_b2 = o_w2 + self.outputs * self.hidden;
        for k in 0..self.outputs {
            grad[o_b2 + k] += dz[k];
            for j in 0..self.hidden {
                grad[o_w2 + k * self.hidden + j] += dz[k] * h[j];
            }
        }
        for j in 0..self.hidden {
            let dh: f64 = (0..self.outputs).map(|k| w2[k * self.hidden + j] * dz[k]).sum();
            let da = dh * (1.0 - h[j] * h[j]);
            grad[o_b1 + j] += da;
            grad[j * INPUT_DIM] += da * x[0];
            grad[j * INPUT_DIM + 1] += da * x[1];
        }
    }
}

fn to_sample(num_classes: usize, class: usize, logits: Vec<f64>) -> ClassifiedSample {
    if class < num_classes {
        ClassifiedSample::foreground(one_hot(class, num_classes).expect("in range"), logits)
    } else {
        ClassifiedSample::background(num_classes, logits)
    }
}

fn relation_pairs(samples: &[ClassifiedSample]) -> Vec<MatchedPair> {
    samples
        .iter()
        .filter(|s| s.is_foreground)
        .map(|s| {
            let gt = argmax(&s.gt_label);
            let pred = s.pred_class();
            if pred < s.num_classes() {
                MatchedPair::new(gt, pred)
            } else {
                MatchedPair::background(gt)
            }
        })
        .collect()
}

/// A thresholdable teacher output on an unlabelled target input.
#[derive(Debug, Clone)]
struct TargetCandidate {
    x: [f64; 2],
    class: usize,
    score: f64,
}

impl Scored for TargetCandidate {
    fn score(&self) -> f64 {
        self.score
    }
}

struct Evaluator {
    mlp: Mlp,
    num_classes: usize,
    target_test: Vec<([f64; 2], usize)>,
    source_test: Vec<([f64; 2], usize)>,
}

impl Evaluator {
    fn target_metrics(&self, p: &[f64]) -> (MetricsReport, Vec<f64>) {
        let c = self.num_classes;
        let probs: Vec<Vec<f64>> = self
            .target_test
            .iter()
            .map(|(x, _)| crate::loss::softmax(&self.mlp.logits(p, x)))
            .collect();
        let mut aps = Vec::with_capacity(c);
        let mut accuracy = Vec::with_capacity(c);
        for class in 0..c {
            let ranked: Vec<(f64, bool)> = probs
                .iter()
                .zip(&self.target_test)
                .map(|(pr, (_, y))| (pr[class], *y == class))
                .collect();
            let positives = ranked.iter().filter(|r| r.1).count();
            aps.push(average_precision(&ranked, positives));
            let hits = probs
                .iter()
                .zip(&self.target_test)
                .filter(|(pr, (_, y))| *y == class && argmax(pr) == class)
                .count();
            accuracy.push(if positives == 0 { 0.0 } else { hits as f64 / positives as f64 });
        }
        (MetricsReport::from_aps(aps), accuracy)
    }

    /// Gap between the estimate and the student's actual source confusion.
    fn icrm_error(&self, p: &[f64], icrm: &ClassRelationMatrix) -> Result<f64> {
        let samples: Vec<ClassifiedSample> = self
            .source_test
            .iter()
            .map(|(x, y)| to_sample(self.num_classes, *y, self.mlp.logits(p, x)))
            .collect();
        let mut tally = BatchConfusion::new(self.num_classes)?;
        tally.accumulate(&relation_pairs(&samples))?;
        Ok(icrm.max_abs_diff(&tally.normalize().to_rows()))
    }
}

/// Runs burn-in then mutual training for one seed.
pub fn run_train_sim(cfg: &TrainSimConfig, seed: u64) -> Result<SimOutcome> {
    validate(cfg)?;
    let c = cfg.num_classes;
    let mlp = Mlp {
        hidden: cfg.hidden,
        outputs: c + 1,
    };
    let source = ClusterStream::new(cfg, 0.0)?;
    let target = ClusterStream::new(cfg, cfg.domain_shift)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1_0000);
    let evaluator = Evaluator {
        mlp,
        num_classes: c,
        target_test: target.batch(cfg.eval_size, &mut eval_rng),
        source_test: source.batch(cfg.eval_size, &mut eval_rng),
    };

    let mut student = mlp.init(&mut init_rng);
    let mut teacher: Option<ParameterVector> = None;
    let mut source_icrm = ClassRelationMatrix::new(c)?;
    let mut target_icrm = ClassRelationMatrix::new(c)?;
    let mut records = Vec::new();
    let steps = cfg.schedule.total_steps;

    for iteration in 0..steps {
        let phase = cfg.schedule.phase(iteration);
        let mut grad = vec![0.0; student.len()];

        let batch = source.batch(cfg.batch_size, &mut data_rng);
        let forwards: Vec<_> = batch.iter().map(|(x, _)| mlp.forward(&student, x)).collect();
        let samples: Vec<ClassifiedSample> = batch
            .iter()
            .zip(&forwards)
            .map(|((_, y), (_, z))| to_sample(c, *y, z.clone()))
            .collect();
        source_icrm.update_from_pairs(&relation_pairs(&samples), cfg.icrm_momentum)?;
        let weights = if cfg.use_icl {
            icl_weights(&source_icrm, &samples, cfg.lambda_l)?
        } else {
            WeightVector::ones(samples.len())
        };
        let sup = weighted_cls_loss(&samples, &weights)?;
        let dz = weighted_cls_loss_grad(&samples, &weights)?;
        for (((x, _), (h, _)), d) in batch.iter().zip(&forwards).zip(&dz) {
            mlp.backward(&student, x, h, d, &mut grad);
        }

        let mut unsup = 0.0;
        if phase == Phase::Mutual {
            let t = match &teacher {
                Some(t) => t.clone(),
                None => burn_in_copy(&ParameterVector::new(student.clone())?)?,
            };
            let unlabeled = target.batch(cfg.batch_size, &mut data_rng);
            let candidates: Vec<TargetCandidate> = unlabeled
                .iter()
                .map(|(x, _)| {
                    let probs = crate::loss::softmax(&mlp.logits(t.as_slice(), x));
                    let class = argmax(&probs);
                    TargetCandidate {
                        x: *x,
                        class,
                        score: probs[class],
                    }
                })
                .collect();
            let kept = filter_pseudo_labels(&candidates, cfg.tau);
            if !kept.is_empty() {
                let forwards: Vec<_> = kept.iter().map(|k| mlp.forward(&student, &k.x)).collect();
                let samples: Vec<ClassifiedSample> = kept
                    .iter()
                    .zip(&forwards)
                    .map(|(k, (_, z))| to_sample(c, k.class, z.clone()))
                    .collect();
                target_icrm.update_from_pairs(&relation_pairs(&samples), cfg.icrm_momentum)?;
                let weights = if cfg.use_icl {
                    icl_weights(&target_icrm, &samples, cfg.lambda_l)?
                } else {
                    WeightVector::ones(samples.len())
                };
                let dz = weighted_cls_loss_grad(&samples, &weights)?;
                for ((k, (h, _)), d) in kept.iter().zip(&forwards).zip(&dz) {
                    let scaled: Vec<f64> = d.iter().map(|v| v * cfg.lambda_u).collect();
                    mlp.backward(&student, &k.x, h, &scaled, &mut grad);
                }
                unsup = unsup_loss(&UnsupervisedBatch {
                    samples,
                    weights,
                    objectness: 0.0,
                })?;
            }
            teacher = Some(t);
        }

        for (p, g) in student.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        if let Some(t) = &teacher {
            teacher = Some(ema_params(t, &ParameterVector::new(student.clone())?, cfg.alpha)?);
        }

        let last = iteration + 1 == steps;
        if (iteration + 1) % cfg.eval_every == 0 || last {
            let model = teacher.as_ref().map_or(student.as_slice(), ParameterVector::as_slice);
            let (report, _) = evaluator.target_metrics(model);
            records.push(SimRecord {
                phase,
                iteration: iteration + 1,
                map: report.map,
                sigma: report.sigma,
                icrm_error: evaluator.icrm_error(&student, &source_icrm)?,
                loss: total_loss(sup, unsup, 0.0, cfg.lambda_u, cfg.lambda_d),
            });
        }
    }

    let model = teacher.as_ref().map_or(student.as_slice(), ParameterVector::as_slice);
    let (report, per_class_accuracy) = evaluator.target_metrics(model);
    Ok(SimOutcome {
        records,
        minority_accuracy: per_class_accuracy[c - 1],
        per_class_accuracy,
        report,
        source_icrm,
        target_icrm,
        teacher,
        student: ParameterVector::new(student)?,
    })
}

fn validate(cfg: &TrainSimConfig) -> Result<()> {
    if cfg.num_classes < 2 {
        return Err(Error::param("num_classes", "need at least 2"));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.eval_size == 0 || cfg.eval_every == 0 {
        return Err(Error::param("batch_size", "sizes must be positive"));
    }
    if !(cfg.imbalance >= 1.0) {
        return Err(Error::param("imbalance", "must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.background_fraction) {
        return Err(Error::param("background_fraction", "must lie in [0, 1)"));
    }
    if cfg.schedule.total_steps == 0 {
        return Err(Error::param("total_steps", "must be positive"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp {
            hidden: 4,
            outputs: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = mlp.init(&mut rng);
        let x = [0.3, -0.7];
        let target = vec![0.2, 0.8];
        let loss = |params: &[f64]| {
            let s = ClassifiedSample::foreground(target.clone(), mlp.logits(params, &x));
            weighted_cls_loss(&[s], &WeightVector(vec![1.3])).unwrap()
        };
        let (h, z) = mlp.forward(&p, &x);
        let s = ClassifiedSample::foreground(target.clone(), z);
        let dz = weighted_cls_loss_grad(&[s], &WeightVector(vec![1.3])).unwrap();
        let mut grad = vec![0.0; p.len()];
        mlp.backward(&p, &x, &h, &dz[0], &mut grad);
        for i in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (loss(&hi) - loss(&lo)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn stream_respects_imbalance() {
        let cfg = TrainSimConfig::default();
        let s = ClusterStream::new(&cfg, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for (_, y) in s.batch(50_000, &mut rng) {
            counts[y] += 1;
        }
        let ratio = counts[0] as f64 / counts[1] as f64;
        assert!((ratio - 10.0).abs() < 1.5, "{counts:?}");
        assert!((counts[2] as f64 / 50_000.0 - 0.2).abs() < 0.01);
    }

    fn short(use_icl: bool) -> TrainSimConfig {
        TrainSimConfig {
            schedule: TrainingSchedule {
                burn_in_steps: 200,
                total_steps: 300,
            },
            alpha: 0.99,
            eval_every: 100,
            eval_size: 300,
            use_icl,
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let a = run_train_sim(&short(true), 3).unwrap();
        let b = run_train_sim(&short(true), 3).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.student, b.student);
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.records[1].phase, Phase::BurnIn);
        assert_eq!(a.records[2].phase, Phase::Mutual);
        assert!(a.teacher.is_some());
    }

    #[test]
    fn burn_in_only_has_no_teacher() {
        let mut cfg = short(false);
        cfg.schedule.burn_in_steps = 300;
        let out = run_train_sim(&cfg, 1).unwrap();
        assert!(out.teacher.is_none());
        assert!(!out.target_icrm.is_row_initialized(0));
        assert!(out.source_icrm.is_row_initialized(0));
    }
}
