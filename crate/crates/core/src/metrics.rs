//! Evaluation metrics. Everything derives from one confusion matrix of
//! pixel counts; entry (i, j) counts pixels of true class i predicted as
//! class j. Classes absent from both prediction and truth are excluded from
//! class-averaged metrics, and the mean divides by the number of classes
//! actually included.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair of index maps.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(
                "accumulate",
                format!("pred has {} pixels, truth {}", pred.len(), truth.len()),
            ));
        }
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if (p as usize) >= self.classes || (t as usize) >= self.classes {
                return Err(Error::invalid(
                    "accumulate",
                    format!(
                        "class index out of range at pixel {}: pred {}, truth {} (classes: {})",
                        i, p, t, self.classes
                    ),
                ));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Value-style accumulation: the input matrix is left unmodified.
    pub fn accumulated(&self, pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
        let mut next = self.clone();
        next.accumulate(pred, truth)?;
        Ok(next)
    }

    /// Entrywise addition; associative and commutative, so per-image shards
    /// merge in any grouping.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.count(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, j)).sum()
    }

    fn check_nonempty(&self, op: &'static str) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::invalid(op, "confusion matrix is empty"));
        }
        Ok(())
    }

    /// A class takes part in averaged metrics if it occurs in the truth or
    /// the prediction, and is not an excluded background.
    fn included(&self, class: usize, include_background: bool) -> bool {
        if class == 0 && !include_background {
            return false;
        }
        self.row_sum(class) + self.col_sum(class) > 0
    }

    /// Fraction of pixels on the diagonal.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.check_nonempty("pixel_accuracy")?;
        let correct: u64 = (0..self.classes).map(|i| self.count(i, i)).sum();
        Ok(correct as f64 / self.total() as f64)
    }

    /// Intersection over union of one class, if the class is present at all.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let union = self.row_sum(class) + self.col_sum(class) - self.count(class, class);
        if union == 0 {
            None
        } else {
            Some(self.count(class, class) as f64 / union as f64)
        }
    }

    /// F1 (Dice) of one class, if the class is present at all.
    pub fn class_f1(&self, class: usize) -> Option<f64> {
        let denom = self.row_sum(class) + self.col_sum(class);
        if denom == 0 {
            None
        } else {
            Some(2.0 * self.count(class, class) as f64 / denom as f64)
        }
    }

    /// Mean IoU over included classes.
    pub fn mean_iou(&self, include_background: bool) -> Result<f64> {
        self.check_nonempty("mean_iou")?;
        self.class_mean("mean_iou", include_background, |c| self.class_iou(c))
    }

    /// Mean F1 over included classes.
    pub fn f1(&self, include_background: bool) -> Result<f64> {
        self.check_nonempty("f1")?;
        self.class_mean("f1", include_background, |c| self.class_f1(c))
    }

    fn class_mean(
        &self,
        op: &'static str,
        include_background: bool,
        per_class: impl Fn(usize) -> Option<f64>,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for c in 0..self.classes {
            if !self.included(c, include_background) {
                continue;
            }
            if let Some(v) = per_class(c) {
                total += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid(op, "no class is present in pred or truth"));
        }
        Ok(total / n as f64)
    }
}

/// Summary triple reported by evaluations.
#[derive(Clone, Copy, Debug)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub mean_iou: f64,
    pub f1: f64,
}

impl MetricSummary {
    pub fn from_matrix(cm: &ConfusionMatrix, include_background: bool) -> Result<Self> {
        Ok(MetricSummary {
            accuracy: cm.pixel_accuracy()?,
            mean_iou: cm.mean_iou(include_background)?,
            f1: cm.f1(include_background)?,
        })
    }
}

/// Evaluation CSV: one row per class (IoU, F1, support) plus a summary row.
pub fn write_eval_csv(
    path: &Path,
    cm: &ConfusionMatrix,
    include_background: bool,
) -> Result<()> {
    let summary = MetricSummary::from_matrix(cm, include_background)?;
    let mut out = String::new();
    out.push_str("class,iou,f1,support\n");
    for c in 0..cm.classes() {
        let support = cm.row_sum(c);
        let (iou, f1) = (cm.class_iou(c), cm.class_f1(c));
        out.push_str(&format!(
            "{},{},{},{}\n",
            c,
            iou.map_or(String::from("nan"), |v| format!("{v:.6}")),
            f1.map_or(String::from("nan"), |v| format!("{v:.6}")),
            support
        ));
    }
    out.push_str(&format!(
        "summary,{:.6},{:.6},{:.6}\n",
        summary.accuracy, summary.mean_iou, summary.f1
    ));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn worked_example() -> ConfusionMatrix {
        // counts [[50,10],[10,30]]
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![50, 10, 10, 30];
        cm
    }

    #[test]
    fn accumulate_counts_matches() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0; 10], &[0; 10]).unwrap();
        assert_eq!(cm.count(0, 0), 10);
        assert_eq!(cm.total(), 10);
    }

    #[test]
    fn accumulate_rejects_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0, 2], &[0, 0]).is_err());
    }

    #[test]
    fn accumulation_is_additive_over_images() {
        let pred1 = [0u8, 1, 1, 0];
        let truth1 = [0u8, 1, 0, 0];
        let pred2 = [1u8, 1, 0];
        let truth2 = [1u8, 0, 0];
        let mut split = ConfusionMatrix::new(2);
        split.accumulate(&pred1, &truth1).unwrap();
        split.accumulate(&pred2, &truth2).unwrap();
        let mut joined = ConfusionMatrix::new(2);
        let (mut pred, mut truth) = (pred1.to_vec(), truth1.to_vec());
        pred.extend_from_slice(&pred2);
        truth.extend_from_slice(&truth2);
        joined.accumulate(&pred, &truth).unwrap();
        assert_eq!(split, joined);
    }

    #[test]
    fn value_style_accumulation_leaves_input_unchanged() {
        let cm = ConfusionMatrix::new(2);
        let next = cm.accumulated(&[0, 1], &[1, 1]).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(next.total(), 2);
    }

    #[test]
    fn random_pairs_match_naive_loop() {
        let mut rng = crate::layers::seeded_rng(61, 0);
        for _ in 0..20 {
            let classes = 4usize;
            let n = 64;
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();
            let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&pred, &truth).unwrap();
            let mut naive = vec![0u64; classes * classes];
            for i in 0..n {
                naive[truth[i] as usize * classes + pred[i] as usize] += 1;
            }
            assert_eq!(cm.counts, naive);
        }
    }

    #[test]
    fn accuracy_worked_example() {
        assert_eq!(worked_example().pixel_accuracy().unwrap(), 0.8);
    }

    #[test]
    fn perfect_and_worst_accuracy() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.mean_iou(true).unwrap(), 1.0);
        assert_eq!(cm.f1(true).unwrap(), 1.0);

        let mut all_wrong = ConfusionMatrix::new(2);
        all_wrong.accumulate(&[1, 0], &[0, 1]).unwrap();
        assert_eq!(all_wrong.pixel_accuracy().unwrap(), 0.0);
    }

    #[test]
    fn miou_worked_example() {
        // IoU₀ = 50/70, IoU₁ = 30/50 → mean ≈ 0.657142857
        let miou = worked_example().mean_iou(true).unwrap();
        assert!((miou - (50.0 / 70.0 + 30.0 / 50.0) / 2.0).abs() < 1e-12);
        assert!((miou - 0.65714).abs() < 1e-5);
    }

    #[test]
    fn f1_worked_example() {
        // F1₀ = 100/120, F1₁ = 60/80 → mean ≈ 0.791666…
        let f1 = worked_example().f1(true).unwrap();
        assert!((f1 - (100.0 / 120.0 + 60.0 / 80.0) / 2.0).abs() < 1e-12);
        assert!((f1 - 0.79167).abs() < 1e-5);
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        // class 2 never appears: mean over classes 0 and 1 only
        let iou0 = 2.0 / 3.0;
        let iou1 = 1.0 / 2.0;
        assert!((cm.mean_iou(true).unwrap() - (iou0 + iou1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn exclude_background_flag_drops_class_zero() {
        let cm = worked_example();
        assert!((cm.mean_iou(false).unwrap() - 30.0 / 50.0).abs() < 1e-12);
        assert!((cm.f1(false).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::new(2);
        assert!(cm.pixel_accuracy().is_err());
        assert!(cm.mean_iou(true).is_err());
    }

    #[test]
    fn f1_is_harmonic_transform_of_iou() {
        let mut rng = crate::layers::seeded_rng(62, 0);
        for _ in 0..20 {
            let mut cm = ConfusionMatrix::new(3);
            let pred: Vec<u8> = (0..100).map(|_| rng.random_range(0..3) as u8).collect();
            let truth: Vec<u8> = (0..100).map(|_| rng.random_range(0..3) as u8).collect();
            cm.accumulate(&pred, &truth).unwrap();
            for c in 0..3 {
                if let (Some(iou), Some(f1)) = (cm.class_iou(c), cm.class_f1(c)) {
                    assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn metrics_invariant_under_label_permutation() {
        let mut rng = crate::layers::seeded_rng(63, 0);
        let pred: Vec<u8> = (0..60).map(|_| rng.random_range(0..3) as u8).collect();
        let truth: Vec<u8> = (0..60).map(|_| rng.random_range(0..3) as u8).collect();
        let perm = [2u8, 0, 1];
        let map = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&pred, &truth).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&map(&pred), &map(&truth)).unwrap();
        assert!((a.pixel_accuracy().unwrap() - b.pixel_accuracy().unwrap()).abs() < 1e-15);
        assert!((a.mean_iou(true).unwrap() - b.mean_iou(true).unwrap()).abs() < 1e-15);
        assert!((a.f1(true).unwrap() - b.f1(true).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn accuracy_of_merge_is_count_weighted_average() {
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&[1, 0], &[1, 1]).unwrap();
        let (acc_a, acc_b) = (a.pixel_accuracy().unwrap(), b.pixel_accuracy().unwrap());
        let (na, nb) = (a.total() as f64, b.total() as f64);
        let mut merged = a.clone();
        merged.merge(&b);
        let expect = (acc_a * na + acc_b * nb) / (na + nb);
        assert!((merged.pixel_accuracy().unwrap() - expect).abs() < 1e-15);
    }
}
