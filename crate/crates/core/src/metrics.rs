//! Confusion-matrix metrics: overall accuracy, average (per-class) accuracy,
//! and Cohen's kappa, all reported as percentages.

use crate::error::{Error, Result};

/// K×K counts; rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Dimension(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        if true_class >= self.classes || predicted >= self.classes {
            return Err(Error::Data(format!(
                "class pair ({true_class}, {predicted}) out of range for K = {}",
                self.classes
            )));
        }
        self.counts[true_class * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.counts[k * self.classes + j]).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + k]).sum()
    }
}

/// Metrics derived from one confusion matrix. Percentages throughout.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    /// Per-class recall; `None` when the class never occurs as truth.
    pub per_class_recall: Vec<Option<f64>>,
    /// Classes excluded from the average (absent from the truth labels).
    pub excluded_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        let nf = n as f64;
        let k = confusion.classes;

        let trace: u64 = (0..k).map(|i| confusion.count(i, i)).sum();
        let overall = trace as f64 / nf * 100.0;

        let mut per_class = Vec::with_capacity(k);
        let mut excluded = Vec::new();
        let mut recall_sum = 0.0;
        let mut recall_n = 0usize;
        for c in 0..k {
            let row = confusion.row_sum(c);
            if row == 0 {
                per_class.push(None);
                excluded.push(c);
                if confusion.col_sum(c) == 0 {
                    log::warn!("class {c} absent from both truth and prediction; excluded from AA");
                } else {
                    log::warn!("class {c} absent from truth labels; excluded from AA");
                }
            } else {
                let r = confusion.count(c, c) as f64 / row as f64 * 100.0;
                per_class.push(Some(r));
                recall_sum += r;
                recall_n += 1;
            }
        }
        if recall_n == 0 {
            return Err(Error::Data("no class present in the truth labels".into()));
        }
        let average = recall_sum / recall_n as f64;

        let p_o = trace as f64 / nf;
        let mut p_e = 0.0;
        for c in 0..k {
            p_e += confusion.row_sum(c) as f64 * confusion.col_sum(c) as f64 / (nf * nf);
        }
        let kappa = if (1.0 - p_e).abs() < f64::EPSILON {
            // Degenerate chance agreement of 1: perfect iff p_o = 1.
            if (p_o - 1.0).abs() < f64::EPSILON {
                100.0
            } else {
                0.0
            }
        } else {
            (p_o - p_e) / (1.0 - p_e) * 100.0
        };

        Ok(MetricsReport {
            confusion,
            overall_accuracy: overall,
            average_accuracy: average,
            kappa,
            per_class_recall: per_class,
            excluded_classes: excluded,
        })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data(format!(
                "{} truth labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted.iter()) {
            cm.record(t, p)?;
        }
        MetricsReport::from_confusion(cm)
    }

    /// Structured-text serialization: metric lines, then the matrix.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::new();
        out.push_str(&format!("overall_accuracy = {:.4}\n", self.overall_accuracy));
        out.push_str(&format!("average_accuracy = {:.4}\n", self.average_accuracy));
        out.push_str(&format!("kappa = {:.4}\n", self.kappa));
        for (c, r) in self.per_class_recall.iter().enumerate() {
            let name = class_names
                .and_then(|n| n.get(c))
                .cloned()
                .unwrap_or_else(|| format!("class_{c}"));
            match r {
                Some(v) => out.push_str(&format!("recall.{name} = {v:.4}\n")),
                None => out.push_str(&format!("recall.{name} = absent\n")),
            }
        }
        out.push_str("confusion_matrix =\n");
        let k = self.confusion.classes;
        for i in 0..k {
            let row: Vec<String> = (0..k).map(|j| self.confusion.count(i, j).to_string()).collect();
            out.push_str(&format!("  {}\n", row.join(" ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_class_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![40, 10, 5, 45]).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert!((r.overall_accuracy - 85.0).abs() < 1e-12);
        assert!((r.average_accuracy - 85.0).abs() < 1e-12);
        assert!((r.kappa - 70.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_is_perfect() {
        let cm = ConfusionMatrix::from_counts(3, vec![7, 0, 0, 0, 11, 0, 0, 0, 2]).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert_eq!(r.overall_accuracy, 100.0);
        assert_eq!(r.average_accuracy, 100.0);
        assert!((r.kappa - 100.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_has_zero_kappa() {
        // Balanced 2-class truth, everything predicted as class 0.
        let cm = ConfusionMatrix::from_counts(2, vec![50, 0, 50, 0]).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert!(r.kappa.abs() < 1e-12);
        assert!((r.overall_accuracy - 50.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_average() {
        // Class 2 never occurs as truth or prediction.
        let cm = ConfusionMatrix::from_counts(3, vec![8, 2, 0, 1, 9, 0, 0, 0, 0]).unwrap();
        let r = MetricsReport::from_confusion(cm).unwrap();
        assert_eq!(r.excluded_classes, vec![2]);
        assert!((r.average_accuracy - 85.0).abs() < 1e-12);
        assert!(r.per_class_recall[2].is_none());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        use rand::Rng;
        let mut rng = crate::rng::substream(31, crate::rng::Stream::Test, 0);
        for _ in 0..200 {
            let k = rng.gen_range(2..6usize);
            let counts: Vec<u64> = (0..k * k).map(|_| rng.gen_range(0..30u64)).collect();
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let cm = ConfusionMatrix::from_counts(k, counts.clone()).unwrap();
            let r = match MetricsReport::from_confusion(cm) {
                Ok(r) => r,
                Err(_) => continue, // no class present
            };

            // Independent recomputation from first principles.
            let n: u64 = counts.iter().sum();
            let mut correct = 0u64;
            for i in 0..k {
                correct += counts[i * k + i];
            }
            let oa = correct as f64 / n as f64 * 100.0;
            assert!((r.overall_accuracy - oa).abs() < 1e-12);

            let mut pe = 0.0;
            for c in 0..k {
                let row: u64 = (0..k).map(|j| counts[c * k + j]).sum();
                let col: u64 = (0..k).map(|i| counts[i * k + c]).sum();
                pe += (row as f64) * (col as f64) / (n as f64 * n as f64);
            }
            let po = correct as f64 / n as f64;
            if (1.0 - pe).abs() > f64::EPSILON {
                let kappa = (po - pe) / (1.0 - pe) * 100.0;
                assert!((r.kappa - kappa).abs() < 1e-12);
            }
        }
    }
}
