//! ROC statistics and classification summaries.

use std::cmp::Ordering;

use crate::{Error, Label, Result};

/// Scores with binary ground truth (`true` = positive class).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pairs: Vec<(f64, bool)>,
    positives: usize,
}

impl ScoredSet {
    pub fn new(pairs: Vec<(f64, bool)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Metric("empty scored set".into()));
        }
        if let Some(i) = pairs.iter().position(|(s, _)| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score at index {i}")));
        }
        let positives = pairs.iter().filter(|(_, p)| *p).count();
        Ok(Self { pairs, positives })
    }

    pub fn from_parts(scores: &[f64], positive: &[bool]) -> Result<Self> {
        if scores.len() != positive.len() {
            return Err(Error::Parameter(format!(
                "{} scores but {} labels",
                scores.len(),
                positive.len()
            )));
        }
        Self::new(scores.iter().copied().zip(positive.iter().copied()).collect())
    }

    pub fn pairs(&self) -> &[(f64, bool)] {
        &self.pairs
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.pairs.len() - self.positives
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.positives == 0 || self.negatives() == 0 {
            return Err(Error::Metric(format!(
                "ROC needs both classes ({} positives, {} negatives)",
                self.positives,
                self.negatives()
            )));
        }
        Ok(())
    }

    /// Same scores with the class flags inverted.
    pub fn flipped(&self) -> Self {
        Self::new(self.pairs.iter().map(|&(s, p)| (s, !p)).collect()).expect("already validated")
    }
}

fn by_score(a: &(f64, bool), b: &(f64, bool)) -> Ordering {
    a.0.total_cmp(&b.0)
}

/// Mann-Whitney statistic via mid-ranks; ties count one half.
pub fn roc_auc(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    let mut sorted = s.pairs.clone();
    sorted.sort_by(by_score);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = sorted[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum += mid_rank * tied_pos as f64;
        i = j + 1;
    }
    let n_pos = s.positives as f64;
    let n_neg = s.negatives() as f64;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Pairwise enumeration of the same statistic, for testing.
pub fn brute_force_auc(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    if s.pairs.len() > 2000 {
        return Err(Error::Parameter("brute-force AUC is limited to 2000 scores".into()));
    }
    let mut credit = 0.0;
    for &(sp, _) in s.pairs.iter().filter(|(_, p)| *p) {
        for &(sn, _) in s.pairs.iter().filter(|(_, p)| !*p) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (s.positives as f64 * s.negatives() as f64))
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// score threshold.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    s.require_both_classes()?;
    let mut sorted = s.pairs.clone();
    sorted.sort_by(|a, b| by_score(b, a));
    let n_pos = s.positives as f64;
    let n_neg = s.negatives() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    Ok(curve)
}

/// TPR at `fpr_cap`, linearly interpolated between ROC vertices.
pub fn tpr_at_fpr(s: &ScoredSet, fpr_cap: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_cap) {
        return Err(Error::Parameter(format!("fpr cap {fpr_cap} outside [0, 1]")));
    }
    let curve = roc_curve(s)?;
    let mut prev = curve[0];
    for &(fpr, tpr) in &curve[1..] {
        if fpr > fpr_cap {
            let t = (fpr_cap - prev.0) / (fpr - prev.0);
            return Ok(prev.1 + t * (tpr - prev.1));
        }
        prev = (fpr, tpr);
    }
    Ok(prev.1)
}

/// McClish-standardised partial AUC over `[0, max_fpr]`; 0.5 is chance.
pub fn standardized_partial_auc(s: &ScoredSet, max_fpr: f64) -> Result<f64> {
    if !(max_fpr > 0.0 && max_fpr <= 1.0) {
        return Err(Error::Parameter(format!("max_fpr {max_fpr} outside (0, 1]")));
    }
    let curve = roc_curve(s)?;
    let mut area = 0.0;
    for w in curve.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x0 >= max_fpr {
            break;
        }
        let (x1c, y1c) = if x1 > max_fpr {
            (max_fpr, y0 + (max_fpr - x0) / (x1 - x0) * (y1 - y0))
        } else {
            (x1, y1)
        };
        area += (x1c - x0) * (y0 + y1c) / 2.0;
    }
    let min_area = 0.5 * max_fpr * max_fpr;
    let max_area = max_fpr;
    Ok(0.5 * (1.0 + (area - min_area) / (max_area - min_area)))
}

/// One-vs-rest AUC for `class`, scoring with `score`.
pub fn one_vs_rest_auc(labels: &[Label], scores: &[f64], class: Label) -> Result<f64> {
    let positive: Vec<bool> = labels.iter().map(|l| *l == class).collect();
    roc_auc(&ScoredSet::from_parts(scores, &positive)?)
}

/// Macro average of the one-vs-rest AUCs of each class present, scoring
/// class `c` with probability component `c`.
pub fn multiclass_auc(labels: &[Label], probs: &[[f64; 3]]) -> Result<f64> {
    if labels.len() != probs.len() {
        return Err(Error::Parameter(format!(
            "{} labels but {} probability rows",
            labels.len(),
            probs.len()
        )));
    }
    let present: Vec<Label> = Label::ALL.into_iter().filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::Metric("multi-class AUC needs at least two classes".into()));
    }
    let mut total = 0.0;
    for &class in &present {
        let scores: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
        total += one_vs_rest_auc(labels, &scores, class)?;
    }
    for class in Label::ALL.iter().filter(|c| !present.contains(c)) {
        log::warn!("class {class} absent; skipped in multi-class AUC");
    }
    Ok(total / present.len() as f64)
}

/// Accuracy and the unweighted mean F1 over all three classes.
pub fn accuracy_and_macro_f1(labels: &[Label], predicted: &[Label]) -> Result<(f64, f64)> {
    if labels.len() != predicted.len() {
        return Err(Error::Parameter(format!(
            "{} labels but {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Parameter("no predictions to score".into()));
    }
    let correct = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / labels.len() as f64;
    let mut f1_sum = 0.0;
    for class in Label::ALL {
        let tp = labels
            .iter()
            .zip(predicted)
            .filter(|(l, p)| **l == class && **p == class)
            .count() as f64;
        let predicted_c = predicted.iter().filter(|p| **p == class).count() as f64;
        let actual_c = labels.iter().filter(|l| **l == class).count() as f64;
        let precision = if predicted_c > 0.0 { tp / predicted_c } else { 0.0 };
        let recall = if actual_c > 0.0 { tp / actual_c } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok((accuracy, f1_sum / Label::ALL.len() as f64))
}
