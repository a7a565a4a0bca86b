use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation of the per-split values.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split, with `p(y)` the split's row mean.
/// Split `k` holds rows `k·n/splits .. (k+1)·n/splits`.
pub fn inception_style_score(probs: &[Vec<f64>], splits: usize) -> Result<MeanStd> {
    let n = probs.len();
    if splits == 0 || splits > n {
        return Err(Error::invalid(format!("{splits} splits for {n} rows")));
    }
    let c = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != c || row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("row {i} is not a probability vector")));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let part = &probs[k * n / splits..(k + 1) * n / splits];
            let m = part.len() as f64;
            let marginal: Vec<f64> = (0..c).map(|j| part.iter().map(|r| r[j]).sum::<f64>() / m).collect();
            let kl: f64 = part
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p / q).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            kl.exp()
        })
        .collect();
    Ok(MeanStd::of(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[intended][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationReport {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.support).sum()
    }
}

/// Fraction of items whose prediction equals the intended class, plus
/// per-class precision, recall and F1 (0 where undefined).
pub fn classification_report(intended: &[usize], predicted: &[usize], num_classes: usize) -> Result<ClassificationReport> {
    if intended.len() != predicted.len() || intended.is_empty() {
        return Err(Error::shape(
            "classification_report",
            format!("{} intended vs {} predicted labels", intended.len(), predicted.len()),
        ));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&a, &b) in intended.iter().zip(predicted) {
        if a >= num_classes || b >= num_classes {
            return Err(Error::OutOfRange {
                what: "class labels",
                index: a.max(b),
                size: num_classes,
            });
        }
        confusion[a][b] += 1;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|k| {
            let tp = confusion[k][k];
            let support: usize = confusion[k].iter().sum();
            let predicted_k: usize = confusion.iter().map(|r| r[k]).sum();
            let precision = ratio(tp, predicted_k);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let c = num_classes as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / intended.len() as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / c,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / c,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c,
        per_class,
        confusion,
    })
}
