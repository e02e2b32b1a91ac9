//! Streaming estimate of the model's class-confusion behaviour.
//!
//! Each training batch is tallied into a [`BatchConfusion`] of ground-truth
//! class against predicted class, normalised per ground-truth row, and folded
//! into a global [`ClassRelationMatrix`] with an exponential moving average.
//! A row is copied verbatim the first time its class is observed, and rows of
//! classes absent from a batch are left untouched, so classes need not appear
//! in every batch.
//!
//! Ground truths whose matched prediction is background are counted in an
//! extra column and then dropped when the row is renormalised over the
//! foreground classes, so the global estimate stays `C×C`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// The class a ground truth was matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Predicted {
    Class(usize),
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchedPair {
    pub gt_class: usize,
    pub pred: Predicted,
}

impl MatchedPair {
    pub fn new(gt_class: usize, pred_class: usize) -> Self {
        Self {
            gt_class,
            pred: Predicted::Class(pred_class),
        }
    }

    pub fn background(gt_class: usize) -> Self {
        Self {
            gt_class,
            pred: Predicted::Background,
        }
    }
}

/// Per-batch tally, `C` rows by `C + 1` columns (last column = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchConfusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl BatchConfusion {
    pub fn new(num_classes: usize) -> Result<Self> {
        check_num_classes(num_classes)?;
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * (num_classes + 1)],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt_class: usize, pred: Predicted) -> u64 {
        self.counts[self.index(gt_class, pred)]
    }

    /// Row `gt_class` as `C + 1` counts.
    pub fn row(&self, gt_class: usize) -> &[u64] {
        let width = self.num_classes + 1;
        &self.counts[gt_class * width..(gt_class + 1) * width]
    }

    /// Adds one count per pair. Every pair is validated before any count changes.
    pub fn accumulate<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a MatchedPair>,
        I::IntoIter: Clone,
    {
        let pairs = pairs.into_iter();
        for pair in pairs.clone() {
            self.check_pair(pair)?;
        }
        for pair in pairs {
            let idx = self.index(pair.gt_class, pair.pred);
            self.counts[idx] += 1;
        }
        Ok(())
    }

    /// Row-normalises the tally and drops the background column.
    ///
    /// A row is present when it has at least one foreground count; rows with no
    /// counts, or only background counts, come back as zeros flagged absent.
    pub fn normalize(&self) -> NormalizedBatch {
        let c = self.num_classes;
        let mut values = vec![0.0; c * c];
        let mut present = vec![false; c];
        for gt in 0..c {
            let row = self.row(gt);
            let total: u64 = row.iter().sum();
            if total == 0 {
                continue;
            }
            let total = total as f64;
            let fg: Vec<f64> = row[..c].iter().map(|&n| n as f64 / total).collect();
            let mass: f64 = fg.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            for (dst, p) in values[gt * c..(gt + 1) * c].iter_mut().zip(&fg) {
                *dst = p / mass;
            }
            present[gt] = true;
        }
        NormalizedBatch {
            num_classes: c,
            values,
            present,
        }
    }

    fn check_pair(&self, pair: &MatchedPair) -> Result<()> {
        let c = self.num_classes;
        if pair.gt_class >= c {
            return Err(Error::ClassIndex {
                index: pair.gt_class,
                num_classes: c,
            });
        }
        if let Predicted::Class(p) = pair.pred {
            if p >= c {
                return Err(Error::ClassIndex {
                    index: p,
                    num_classes: c,
                });
            }
        }
        Ok(())
    }

    fn index(&self, gt_class: usize, pred: Predicted) -> usize {
        let col = match pred {
            Predicted::Class(p) => p,
            Predicted::Background => self.num_classes,
        };
        gt_class * (self.num_classes + 1) + col
    }
}

/// A row-normalised batch tally over the foreground classes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBatch {
    num_classes: usize,
    values: Vec<f64>,
    present: Vec<bool>,
}

impl NormalizedBatch {
    /// Builds a batch from explicit rows. Present rows must be stochastic.
    pub fn from_rows(rows: &[Vec<f64>], present: &[bool]) -> Result<Self> {
        let c = rows.len();
        check_num_classes(c)?;
        if present.len() != c {
            return Err(Error::Shape(format!(
                "{} presence flags for {c} rows",
                present.len()
            )));
        }
        let mut values = Vec::with_capacity(c * c);
        for (i, row) in rows.iter().enumerate() {
            check_row(row, c, present[i], i)?;
            values.extend_from_slice(row);
        }
        Ok(Self {
            num_classes: c,
            values,
            present: present.to_vec(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Global EMA estimate of `P(predicted j | ground truth i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct ClassRelationMatrix {
    num_classes: usize,
    values: Vec<f64>,
    row_initialized: Vec<bool>,
}

/// Which classes the estimate currently treats as well or poorly classified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    pub majority: Vec<usize>,
    pub minority: Vec<usize>,
}

impl ClassPartition {
    pub fn is_majority(&self, class: usize) -> bool {
        self.majority.contains(&class)
    }
}

impl ClassRelationMatrix {
    /// All-zero matrix with every row uninitialised.
    pub fn new(num_classes: usize) -> Result<Self> {
        check_num_classes(num_classes)?;
        Ok(Self {
            num_classes,
            values: vec![0.0; num_classes * num_classes],
            row_initialized: vec![false; num_classes],
        })
    }

    pub fn identity(num_classes: usize) -> Result<Self> {
        let mut m = Self::new(num_classes)?;
        for c in 0..num_classes {
            m.values[c * num_classes + c] = 1.0;
            m.row_initialized[c] = true;
        }
        Ok(m)
    }

    /// Builds a matrix from rows; all-zero rows are uninitialised, every other
    /// row must be stochastic.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        check_num_classes(c)?;
        let mut values = Vec::with_capacity(c * c);
        let mut row_initialized = Vec::with_capacity(c);
        for (i, row) in rows.iter().enumerate() {
            let init = row.iter().any(|&v| v != 0.0);
            check_row(row, c, init, i)?;
            values.extend_from_slice(row);
            row_initialized.push(init);
        }
        Ok(Self {
            num_classes: c,
            values,
            row_initialized,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt_class: usize, pred_class: usize) -> f64 {
        self.values[gt_class * self.num_classes + pred_class]
    }

    pub fn row(&self, gt_class: usize) -> &[f64] {
        &self.values[gt_class * self.num_classes..(gt_class + 1) * self.num_classes]
    }

    pub fn column(&self, pred_class: usize) -> Vec<f64> {
        (0..self.num_classes)
            .map(|r| self.get(r, pred_class))
            .collect()
    }

    pub fn is_row_initialized(&self, gt_class: usize) -> bool {
        self.row_initialized[gt_class]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|i| self.row(i).to_vec()).collect()
    }

    /// Folds a normalised batch into the estimate.
    ///
    /// Present rows are copied when the global row is still empty and blended
    /// as `momentum * global + (1 - momentum) * batch` otherwise.
    pub fn ema_update(&mut self, batch: &NormalizedBatch, momentum: f64) -> Result<()> {
        check_unit_interval("momentum", momentum)?;
        if batch.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "batch has {} classes, matrix has {}",
                batch.num_classes, self.num_classes
            )));
        }
        let c = self.num_classes;
        for r in 0..c {
            if !batch.present[r] {
                continue;
            }
            let src = batch.row(r);
            let dst = &mut self.values[r * c..(r + 1) * c];
            if self.row_initialized[r] {
                for (g, &b) in dst.iter_mut().zip(src) {
                    *g = momentum * *g + (1.0 - momentum) * b;
                }
            } else {
                dst.copy_from_slice(src);
                self.row_initialized[r] = true;
            }
        }
        Ok(())
    }

    /// Tally, normalise and fold one batch of matched pairs.
    pub fn update_from_pairs(&mut self, pairs: &[MatchedPair], momentum: f64) -> Result<()> {
        let mut batch = BatchConfusion::new(self.num_classes)?;
        batch.accumulate(pairs)?;
        self.ema_update(&batch.normalize(), momentum)
    }

    /// Mean of the diagonal over all `C` classes; uninitialised rows count as 0.
    pub fn mean_diagonal(&self) -> f64 {
        let sum: f64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        sum / self.num_classes as f64
    }

    /// Classes whose diagonal is strictly above the mean diagonal are majority;
    /// everything else, ties included, is minority.
    pub fn partition_classes(&self) -> ClassPartition {
        let mean = self.mean_diagonal();
        let (majority, minority) =
            (0..self.num_classes).partition(|&c| self.get(c, c) > mean);
        ClassPartition { majority, minority }
    }

    /// Largest absolute entry-wise difference to `other` (`C×C` rows).
    pub fn max_abs_diff(&self, other: &[Vec<f64>]) -> f64 {
        let mut worst = 0.0f64;
        for (r, row) in other.iter().enumerate().take(self.num_classes) {
            for (c, &v) in row.iter().enumerate().take(self.num_classes) {
                worst = worst.max((self.get(r, c) - v).abs());
            }
        }
        worst
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serialises")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    num_classes: usize,
    values: Vec<Vec<f64>>,
    row_initialized: Vec<bool>,
}

impl From<ClassRelationMatrix> for MatrixRepr {
    fn from(m: ClassRelationMatrix) -> Self {
        MatrixRepr {
            num_classes: m.num_classes,
            values: m.to_rows(),
            row_initialized: m.row_initialized,
        }
    }
}

impl TryFrom<MatrixRepr> for ClassRelationMatrix {
    type Error = Error;

    fn try_from(repr: MatrixRepr) -> Result<Self> {
        let c = repr.num_classes;
        check_num_classes(c)?;
        if repr.values.len() != c || repr.row_initialized.len() != c {
            return Err(Error::Shape(format!(
                "matrix declares {c} classes but has {} rows and {} flags",
                repr.values.len(),
                repr.row_initialized.len()
            )));
        }
        let mut values = Vec::with_capacity(c * c);
        for (i, row) in repr.values.iter().enumerate() {
            check_row(row, c, repr.row_initialized[i], i)?;
            values.extend_from_slice(row);
        }
        Ok(Self {
            num_classes: c,
            values,
            row_initialized: repr.row_initialized,
        })
    }
}

fn check_num_classes(c: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::param("num_classes", format!("need at least 2, got {c}")));
    }
    Ok(())
}

/// A stochastic row has entries in [0,1] summing to 1; an empty row is all zeros.
fn check_row(row: &[f64], c: usize, stochastic: bool, index: usize) -> Result<()> {
    if row.len() != c {
        return Err(Error::Shape(format!(
            "row {index} has {} entries, expected {c}",
            row.len()
        )));
    }
    if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Shape(format!("row {index} has entries outside [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if stochastic && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Shape(format!("row {index} sums to {sum}, expected 1")));
    }
    if !stochastic && sum != 0.0 {
        return Err(Error::Shape(format!("uninitialised row {index} is not all zero")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_rows_close(actual: &[Vec<f64>], expected: &[Vec<f64>]) {
        for (a, e) in actual.iter().zip(expected) {
            for (x, y) in a.iter().zip(e) {
                assert!((x - y).abs() < 1e-12, "{actual:?} != {expected:?}");
            }
        }
    }

    #[test]
    fn accumulate_tallies_pairs() {
        let mut b = BatchConfusion::new(2).unwrap();
        b.accumulate(&[MatchedPair::new(0, 0), MatchedPair::new(0, 1), MatchedPair::new(1, 1)])
            .unwrap();
        assert_eq!(b.row(0), &[1, 1, 0]);
        assert_eq!(b.row(1), &[0, 1, 0]);

        let before = b.clone();
        b.accumulate(&[]).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn accumulate_background_column() {
        let mut b = BatchConfusion::new(2).unwrap();
        b.accumulate(&[MatchedPair::background(0)]).unwrap();
        assert_eq!(b.row(0), &[0, 0, 1]);
        assert_eq!(b.row(1), &[0, 0, 0]);
    }

    #[test]
    fn accumulate_rejects_bad_index_atomically() {
        let mut b = BatchConfusion::new(2).unwrap();
        let err = b
            .accumulate(&[MatchedPair::new(0, 0), MatchedPair::new(0, 2)])
            .unwrap_err();
        assert!(matches!(err, Error::ClassIndex { index: 2, .. }));
        assert_eq!(b.count(0, Predicted::Class(0)), 0);
        assert!(b.accumulate(&[MatchedPair::background(5)]).is_err());
    }

    fn batch_from_counts(rows: &[[u64; 3]]) -> BatchConfusion {
        let mut b = BatchConfusion::new(2).unwrap();
        for (gt, row) in rows.iter().enumerate() {
            for (col, &n) in row.iter().enumerate() {
                let pred = if col == 2 {
                    Predicted::Background
                } else {
                    Predicted::Class(col)
                };
                let pairs = vec![MatchedPair { gt_class: gt, pred }; n as usize];
                b.accumulate(&pairs).unwrap();
            }
        }
        b
    }

    #[test]
    fn normalize_rows() {
        let n = batch_from_counts(&[[8, 2, 0], [1, 3, 0]]).normalize();
        assert_rows_close(&n.to_rows(), &[vec![0.8, 0.2], vec![0.25, 0.75]]);
        assert!(n.is_present(0) && n.is_present(1));

        let n = batch_from_counts(&[[0, 0, 0], [0, 4, 0]]).normalize();
        assert!(!n.is_present(0));
        assert_eq!(n.row(0), &[0.0, 0.0]);
        assert_eq!(n.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_excludes_background() {
        let n = batch_from_counts(&[[3, 1, 4], [0, 0, 0]]).normalize();
        assert_rows_close(&n.to_rows()[..1], &[vec![0.75, 0.25]]);
        // a row with only background counts carries no foreground information
        let n = batch_from_counts(&[[0, 0, 5], [0, 1, 0]]).normalize();
        assert!(!n.is_present(0));
    }

    #[test]
    fn ema_update_blends_initialized_rows() {
        let mut g = ClassRelationMatrix::identity(2).unwrap();
        let b = NormalizedBatch::from_rows(&[vec![0.8, 0.2], vec![0.25, 0.75]], &[true, true])
            .unwrap();
        g.ema_update(&b, 0.9).unwrap();
        assert_rows_close(&g.to_rows(), &[vec![0.98, 0.02], vec![0.025, 0.975]]);
    }

    #[test]
    fn ema_update_copies_into_empty_rows() {
        let mut g = ClassRelationMatrix::new(2).unwrap();
        let rows = vec![vec![0.8, 0.2], vec![0.25, 0.75]];
        let b = NormalizedBatch::from_rows(&rows, &[true, true]).unwrap();
        g.ema_update(&b, 0.99).unwrap();
        assert_eq!(g.to_rows(), rows);
        assert!(g.is_row_initialized(0) && g.is_row_initialized(1));
    }

    #[test]
    fn ema_update_momentum_one_and_absent_rows() {
        let start = ClassRelationMatrix::from_rows(&[vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap();
        let b = NormalizedBatch::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[true, true])
            .unwrap();
        let mut g = start.clone();
        g.ema_update(&b, 1.0).unwrap();
        assert_eq!(g, start);

        let b = NormalizedBatch::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], &[true, false])
            .unwrap();
        let mut g = start.clone();
        g.ema_update(&b, 0.5).unwrap();
        assert_eq!(g.row(1), start.row(1));
        assert_rows_close(&g.to_rows()[..1], &[vec![0.3, 0.7]]);
    }

    #[test]
    fn ema_update_rejects_bad_momentum() {
        let mut g = ClassRelationMatrix::new(2).unwrap();
        let b = BatchConfusion::new(2).unwrap().normalize();
        assert!(matches!(g.ema_update(&b, 1.5), Err(Error::Parameter { .. })));
        assert!(g.ema_update(&b, -0.1).is_err());
    }

    #[test]
    fn mean_diagonal_cases() {
        assert_eq!(ClassRelationMatrix::identity(3).unwrap().mean_diagonal(), 1.0);
        let m = ClassRelationMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        assert!((m.mean_diagonal() - 0.8).abs() < 1e-12);
        assert_eq!(ClassRelationMatrix::new(4).unwrap().mean_diagonal(), 0.0);
    }

    #[test]
    fn partition_cases() {
        let m = ClassRelationMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let p = m.partition_classes();
        assert_eq!(p.majority, vec![0]);
        assert_eq!(p.minority, vec![1]);

        let p = ClassRelationMatrix::identity(3).unwrap().partition_classes();
        assert!(p.majority.is_empty());
        assert_eq!(p.minority, vec![0, 1, 2]);

        let m = ClassRelationMatrix::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.8, 0.1],
            vec![0.5, 0.4, 0.1],
        ])
        .unwrap();
        let p = m.partition_classes();
        assert_eq!(p.majority, vec![0, 1]);
        assert_eq!(p.minority, vec![2]);

        let p = ClassRelationMatrix::new(3).unwrap().partition_classes();
        assert_eq!(p.minority, vec![0, 1, 2]);
    }

    #[test]
    fn past_batch_influence_decays_geometrically() {
        let m = 0.7;
        let batches = [
            [vec![0.6, 0.4], vec![0.2, 0.8]],
            [vec![0.9, 0.1], vec![0.5, 0.5]],
            [vec![0.3, 0.7], vec![0.0, 1.0]],
        ];
        let initial = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut g = ClassRelationMatrix::from_rows(&initial).unwrap();
        for rows in &batches {
            let b = NormalizedBatch::from_rows(rows, &[true, true]).unwrap();
            g.ema_update(&b, m).unwrap();
        }
        // closed form: m^3 * init + sum_k m^k (1-m) * batch_{2-k}
        for r in 0..2 {
            for c in 0..2 {
                let mut expected = m.powi(3) * initial[r][c];
                for (k, rows) in batches.iter().rev().enumerate() {
                    expected += m.powi(k as i32) * (1.0 - m) * rows[r][c];
                }
                assert!((g.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut m = ClassRelationMatrix::new(3).unwrap();
        let b = NormalizedBatch::from_rows(
            &[vec![0.1, 0.2, 0.7], vec![0.0; 3], vec![1.0 / 3.0; 3]],
            &[true, false, true],
        )
        .unwrap();
        m.ema_update(&b, 0.5).unwrap();
        let back: ClassRelationMatrix = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);

        let bad = r#"{"num_classes":2,"values":[[0.5,0.6],[0,0]],"row_initialized":[true,false]}"#;
        assert!(serde_json::from_str::<ClassRelationMatrix>(bad).is_err());
        let bad = r#"{"num_classes":3,"values":[[1,0],[0,1]],"row_initialized":[true,true]}"#;
        assert!(serde_json::from_str::<ClassRelationMatrix>(bad).is_err());
    }

    fn stochastic_rows(c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), c).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-3;
                    let mut r: Vec<f64> = r.iter().map(|v| v / s).collect();
                    let rest = 1.0 - r[1..].iter().sum::<f64>();
                    r[0] = rest;
                    r
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ema_preserves_row_stochasticity(
            a in stochastic_rows(4),
            b in stochastic_rows(4),
            momentum in 0.0f64..=1.0,
        ) {
            let mut g = ClassRelationMatrix::from_rows(&a).unwrap();
            let batch = NormalizedBatch::from_rows(&b, &[true; 4]).unwrap();
            g.ema_update(&batch, momentum).unwrap();
            for r in 0..4 {
                let sum: f64 = g.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(g.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn accumulate_is_order_insensitive(
            raw in prop::collection::vec((0usize..3, 0usize..4), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pairs: Vec<MatchedPair> = raw
                .iter()
                .map(|&(g, p)| if p == 3 { MatchedPair::background(g) } else { MatchedPair::new(g, p) })
                .collect();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut a = BatchConfusion::new(3).unwrap();
            let mut b = BatchConfusion::new(3).unwrap();
            a.accumulate(&pairs).unwrap();
            b.accumulate(&shuffled).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
