//! Three-class evaluation: accuracy, weighted precision/recall/F1 over a
//! confusion matrix, and weighted one-vs-rest ROC AUC via the rank
//! statistic (Mann-Whitney with tie correction).
//!
//! Weighting uses w_i = n_i / sum(n_j), each class's share of true
//! instances. Zero-denominator classes contribute 0 with a warning.

use serde::Serialize;

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 3;

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[usize], truth: &[usize]) -> Result<Self> {
        if preds.len() != truth.len() {
            return Err(Error::data(format!(
                "prediction/truth length mismatch: {} vs {}",
                preds.len(),
                truth.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::data("cannot build a confusion matrix from nothing"));
        }
        let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
        for (i, (&p, &t)) in preds.iter().zip(truth).enumerate() {
            if p >= N_CLASSES || t >= N_CLASSES {
                return Err(Error::data(format!(
                    "label out of range at index {i}: pred {p}, true {t}"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..N_CLASSES)
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..N_CLASSES)
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }

    /// True instances of a class (its row sum).
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("accuracy of an empty confusion matrix"));
    }
    let correct: u64 = (0..N_CLASSES).map(|i| cm.counts[i][i]).sum();
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

const CLASS_NAMES: [&str; N_CLASSES] = ["SUPPORT", "OPPOSE", "NEUTRAL"];

/// Per-class P/R/F1 and their support-weighted sums. The weighted F1 is
/// the weighted sum of per-class harmonic means (not the harmonic mean of
/// the weighted aggregates).
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<WeightedMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("metrics of an empty confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(N_CLASSES);
    let mut warnings = Vec::new();
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);

    #[allow(clippy::needless_range_loop)]
    for class in 0..N_CLASSES {
        let tp = cm.true_positives(class) as f64;
        let fp = cm.false_positives(class) as f64;
        let fn_ = cm.false_negatives(class) as f64;
        let support = cm.support(class);
        let weight = support as f64 / total as f64;

        let precision = if tp + fp > 0.0 {
            tp / (tp + fp)
        } else {
            warnings.push(format!(
                "class {} never predicted; precision treated as 0",
                CLASS_NAMES[class]
            ));
            0.0
        };
        let recall = if tp + fn_ > 0.0 {
            tp / (tp + fn_)
        } else {
            warnings.push(format!(
                "class {} has no true instances; recall treated as 0",
                CLASS_NAMES[class]
            ));
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };

        wp += weight * precision;
        wr += weight * recall;
        wf += weight * f1;
        per_class.push(ClassMetrics {
            label: CLASS_NAMES[class].to_string(),
            precision,
            recall,
            f1,
            support,
            weight,
        });
    }

    Ok(WeightedMetrics {
        precision: wp,
        recall: wr,
        f1: wf,
        per_class,
        warnings,
    })
}

/// One-vs-rest AUC for one class from (score, is_positive) pairs, via the
/// Mann-Whitney U statistic with average ranks on ties.
fn binary_auc_rank(scores: &[(f64, bool)]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .0
            .partial_cmp(&scores[b].0)
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    let mut rank_sum_pos = 0.0f64;
    let mut n_pos = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // tie group [i, j]: everyone gets the average rank (1-based)
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scores[idx].1 {
                rank_sum_pos += avg_rank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = n as u64 - n_pos;
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

#[derive(Debug, Clone)]
pub struct WeightedAuc {
    pub auc: f64,
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Support-weighted one-vs-rest AUC. `scores[i]` are the per-class
/// probabilities for example i (rows must sum to 1); classes lacking a
/// positive or a negative are skipped and the weights renormalized.
pub fn weighted_auc(scores: &[[f64; N_CLASSES]], truth: &[usize]) -> Result<WeightedAuc> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::data(format!(
            "scores/truth length mismatch or empty: {} vs {}",
            scores.len(),
            truth.len()
        )));
    }
    for (i, row) in scores.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!(
                "probability row {i} sums to {sum}, not 1"
            )));
        }
    }
    for (i, &t) in truth.iter().enumerate() {
        if t >= N_CLASSES {
            return Err(Error::data(format!("label {t} out of range at index {i}")));
        }
    }

    let n = truth.len() as f64;
    let mut per_class = Vec::with_capacity(N_CLASSES);
    let mut warnings = Vec::new();
    let mut weighted_sum = 0.0;
    let mut weight_used = 0.0;

    for class in 0..N_CLASSES {
        let n_pos = truth.iter().filter(|&&t| t == class).count();
        let n_neg = truth.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            warnings.push(format!(
                "class {} lacks positives or negatives; skipped from weighted AUC",
                CLASS_NAMES[class]
            ));
            per_class.push(None);
            continue;
        }
        let pairs: Vec<(f64, bool)> = scores
            .iter()
            .zip(truth)
            .map(|(row, &t)| (row[class], t == class))
            .collect();
        let auc = binary_auc_rank(&pairs);
        per_class.push(Some(auc));
        let weight = n_pos as f64 / n;
        weighted_sum += weight * auc;
        weight_used += weight;
    }

    if weight_used == 0.0 {
        return Err(Error::data(
            "no class had both positives and negatives; weighted AUC undefined",
        ));
    }
    Ok(WeightedAuc {
        auc: weighted_sum / weight_used,
        per_class,
        warnings,
    })
}

/// ROC curve points (fpr, tpr) for one class, for external plotting.
pub fn roc_points(scores: &[[f64; N_CLASSES]], truth: &[usize], class: usize) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .map(|(row, &t)| (row[class], t == class))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let n_pos = pairs.iter().filter(|p| p.1).count() as f64;
    let n_neg = pairs.len() as f64 - n_pos;

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut prev_score = f64::INFINITY;
    for (score, is_pos) in pairs {
        if score != prev_score {
            points.push((fp / n_neg.max(1.0), tp / n_pos.max(1.0)));
            prev_score = score;
        }
        if is_pos {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
    }
    points.push((fp / n_neg.max(1.0), tp / n_pos.max(1.0)));
    points
}

/// Evaluation summary with fixed serialization keys.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub auc_weighted: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub n_examples: u64,
    pub warnings: Vec<String>,
}

/// Assemble the full report; AUC is included when probability scores are
/// available and at least one class has both positives and negatives.
pub fn build_report(
    preds: &[usize],
    truth: &[usize],
    scores: Option<&[[f64; N_CLASSES]]>,
) -> Result<MetricsReport> {
    let cm = ConfusionMatrix::from_pairs(preds, truth)?;
    let acc = accuracy(&cm)?;
    let wm = weighted_metrics(&cm)?;
    let mut warnings = wm.warnings.clone();

    let auc = match scores {
        Some(s) => match weighted_auc(s, truth) {
            Ok(wa) => {
                warnings.extend(wa.warnings);
                Some(wa.auc)
            }
            Err(Error::Data(msg)) => {
                warnings.push(msg);
                None
            }
            Err(e) => return Err(e),
        },
        None => None,
    };

    Ok(MetricsReport {
        accuracy: acc,
        precision_weighted: wm.precision,
        recall_weighted: wm.recall,
        f1_weighted: wm.f1,
        auc_weighted: auc,
        per_class: wm.per_class,
        confusion: cm.counts,
        n_examples: cm.total(),
        warnings,
    })
}
