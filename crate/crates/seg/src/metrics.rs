//! Confusion-matrix segmentation metrics.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

/// JSON evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Overall pixel accuracy: correct / counted pixels.
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    /// `null` where a class is absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Row-major `K x K`.
    pub confusion: Vec<u64>,
    pub ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(SegError::Invalid(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            counts,
            ignored: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one label-map pair. `width` is used only for error coordinates.
    /// Validation runs before any count changes.
    pub fn update(&mut self, prediction: &[u32], truth: &[u32], width: usize, ignore_index: u32) -> Result<()> {
        if prediction.len() != truth.len() {
            return Err(SegError::Invalid(format!(
                "prediction has {} pixels, truth {}",
                prediction.len(),
                truth.len()
            )));
        }
        let k = self.num_classes as u32;
        let w = width.max(1);
        for (i, (&p, &t)) in prediction.iter().zip(truth).enumerate() {
            if p >= k {
                return Err(SegError::Invalid(format!(
                    "prediction {p} at (row {}, col {}) outside 0..{k}",
                    i / w,
                    i % w
                )));
            }
            if t >= k && t != ignore_index {
                return Err(SegError::Invalid(format!(
                    "truth label {t} at (row {}, col {}) outside 0..{k}",
                    i / w,
                    i % w
                )));
            }
        }
        for (&p, &t) in prediction.iter().zip(truth) {
            if t == ignore_index {
                self.ignored += 1;
            } else {
                self.counts[t as usize * self.num_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.num_classes..(c + 1) * self.num_classes].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.count(r, c)).sum()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(SegError::Invalid("no counted pixels".into()));
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Per-class IoU, `None` where the class never occurs in truth or prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over defined classes.
    ///
    /// The mean is summed as an exact fraction and rounded once, so e.g.
    /// IoUs 1/2 and 2/3 give exactly `7.0 / 12.0`. Falls back to a float sum
    /// when the fraction outgrows 53-bit integers.
    pub fn mean_iou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        if self.total() == 0 {
            return Err(SegError::Invalid("no counted pixels".into()));
        }
        let per = self.per_class_iou();
        let fractions: Vec<(u64, u64)> = (0..self.num_classes)
            .filter_map(|c| {
                let tp = self.count(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then_some((tp, union))
            })
            .collect();
        if fractions.is_empty() {
            return Err(SegError::Invalid("IoU undefined for every class".into()));
        }
        let mean = exact_mean(&fractions).unwrap_or_else(|| {
            let defined: Vec<f64> = per.iter().flatten().copied().collect();
            defined.iter().sum::<f64>() / defined.len() as f64
        });
        Ok((mean, per))
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let (mean_iou, per_class_iou) = self.mean_iou()?;
        Ok(MetricsReport {
            pixel_accuracy: self.pixel_accuracy()?,
            mean_iou,
            per_class_iou,
            confusion: self.counts.clone(),
            ignored_pixels: self.ignored,
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions, correctly rounded, if it fits in 53 bits.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fractions {
        let (n, d) = (u128::from(n), u128::from(d));
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den);
        (num, den) = (num / g.max(1), den / g.max(1));
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let g = gcd(num, den);
    (num, den) = (num / g.max(1), den / g.max(1));
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.num_classes, rhs.num_classes, "class count mismatch");
        self.counts.iter_mut().zip(&rhs.counts).for_each(|(a, b)| *a += b);
        self.ignored += rhs.ignored;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
        cm
    }

    #[test]
    fn worked_example() {
        let cm = worked();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.75);
        let (miou, per) = cm.mean_iou().unwrap();
        assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(miou, 7.0 / 12.0);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let labels = [0, 1, 2, 2, 1, 0, 0];
        cm.update(&labels, &labels, 7, 255).unwrap();
        assert!((0..3).all(|r| (0..3).all(|c| r == c || cm.count(r, c) == 0)));
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.mean_iou().unwrap().0, 1.0);
    }

    #[test]
    fn all_void_only_counts_ignored() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1], &[255, 255, 255], 3, 255).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.ignored_pixels(), 3);
        assert!(cm.pixel_accuracy().is_err());
        assert!(cm.mean_iou().is_err());
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[0, 1], 2, 255).unwrap();
        let (miou, per) = cm.mean_iou().unwrap();
        assert_eq!(per[2], None);
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn zero_diagonal_gives_zero_accuracy() {
        let cm = ConfusionMatrix::from_counts(2, vec![0, 3, 4, 0]).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_prediction_names_coordinates() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.update(&[0, 0, 0, 5], &[0, 0, 0, 0], 2, 255).unwrap_err();
        assert!(err.to_string().contains("row 1, col 1"), "{err}");
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn report_serialises_undefined_as_null() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[0, 1], 2, 255).unwrap();
        let json = serde_json::to_value(cm.report().unwrap()).unwrap();
        assert!(json["per_class_iou"][2].is_null());
        assert_eq!(json["confusion"].as_array().unwrap().len(), 9);
    }
}
