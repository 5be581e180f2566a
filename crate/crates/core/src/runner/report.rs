use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::ViewSelector;
use crate::metrics::{
    accuracy_and_macro_f1, multiclass_auc, one_vs_rest_auc, standardized_partial_auc, tpr_at_fpr, ScoredSet,
};
use crate::oracle::CacheStats;
use crate::{Error, Label, Result};

/// Column names of `report.csv` after the identifying columns.
pub const METRIC_COLUMNS: [&str; 12] = [
    "retain_vs_all_auc",
    "forget_vs_all_auc",
    "holdout_vs_all_auc",
    "multi_class_auc",
    "retain_vs_all_auc_at_1_fp",
    "forget_vs_all_auc_at_1_fp",
    "holdout_vs_all_auc_at_1_fp",
    "retained_vs_forgotten",
    "forgotten_vs_holdout",
    "overall_score",
    "accuracy",
    "f1",
];

/// All values in percent; `None` renders as `n/a`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues(pub [Option<f64>; 12]);

impl MetricValues {
    pub fn get(&self, column: &str) -> Option<f64> {
        METRIC_COLUMNS.iter().position(|c| *c == column).and_then(|i| self.0[i])
    }

    /// Element-wise mean; a column is `None` if any input lacks it.
    pub fn mean(values: &[MetricValues]) -> MetricValues {
        let mut out = [None; 12];
        for (i, slot) in out.iter_mut().enumerate() {
            let col: Option<Vec<f64>> = values.iter().map(|v| v.0[i]).collect();
            *slot = col
                .filter(|c| !c.is_empty())
                .map(|c| c.iter().sum::<f64>() / c.len() as f64);
        }
        MetricValues(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub fpr_cap: f64,
    /// Report McClish partial AUC instead of TPR in the low-FPR columns.
    pub partial_auc: bool,
}

fn percent(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(v) => Ok(Some(100.0 * v)),
        Err(Error::Metric(m)) => {
            log::warn!("metric not defined: {m}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn low_fpr(labels: &[Label], scores: &[f64], class: Label, opts: &MetricOptions) -> Result<Option<f64>> {
    let positive: Vec<bool> = labels.iter().map(|l| *l == class).collect();
    let set = ScoredSet::from_parts(scores, &positive)?;
    percent(if opts.partial_auc {
        standardized_partial_auc(&set, opts.fpr_cap)
    } else {
        tpr_at_fpr(&set, opts.fpr_cap)
    })
}

/// AUC of `positive` against `negative` using only samples of those classes.
fn pairwise(labels: &[Label], scores: &[f64], positive: Label, negative: Label) -> Result<Option<f64>> {
    let (s, p): (Vec<f64>, Vec<bool>) = labels
        .iter()
        .zip(scores)
        .filter(|(l, _)| **l == positive || **l == negative)
        .map(|(l, s)| (*s, *l == positive))
        .unzip();
    if s.is_empty() {
        return Ok(None);
    }
    percent(crate::metrics::roc_auc(&ScoredSet::from_parts(&s, &p)?))
}

fn ratio(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        a / (a + b)
    } else {
        0.5
    }
}

/// Metrics of a 3-class probabilistic classifier.
pub fn classifier_metrics(
    labels: &[Label],
    probs: &[[f64; 3]],
    predicted: &[Label],
    opts: &MetricOptions,
) -> Result<MetricValues> {
    let mut v = [None; 12];
    for class in Label::ALL {
        let scores: Vec<f64> = probs.iter().map(|p| p[class.index()]).collect();
        v[class.index()] = percent(one_vs_rest_auc(labels, &scores, class))?;
        v[4 + class.index()] = low_fpr(labels, &scores, class, opts)?;
    }
    v[3] = percent(multiclass_auc(labels, probs))?;
    let (r, f, h) = (
        Label::Retained.index(),
        Label::Forgotten.index(),
        Label::Holdout.index(),
    );
    let rf: Vec<f64> = probs.iter().map(|p| ratio(p[r], p[f])).collect();
    let fh: Vec<f64> = probs.iter().map(|p| ratio(p[f], p[h])).collect();
    v[7] = pairwise(labels, &rf, Label::Retained, Label::Forgotten)?;
    v[8] = pairwise(labels, &fh, Label::Forgotten, Label::Holdout)?;
    let (acc, f1) = accuracy_and_macro_f1(labels, predicted)?;
    v[9] = Some(100.0 * f1);
    v[10] = Some(100.0 * acc);
    v[11] = Some(100.0 * f1);
    Ok(MetricValues(v))
}

/// Metrics of a scalar score where higher means more memorized. The same
/// score ranks every class; the multi-class AUC is fixed at 50.
pub fn scalar_metrics(labels: &[Label], scores: &[f64], opts: &MetricOptions) -> Result<MetricValues> {
    let mut v = [None; 12];
    for class in Label::ALL {
        v[class.index()] = percent(one_vs_rest_auc(labels, scores, class))?;
        v[4 + class.index()] = low_fpr(labels, scores, class, opts)?;
    }
    v[3] = Some(50.0);
    v[7] = pairwise(labels, scores, Label::Retained, Label::Forgotten)?;
    v[8] = pairwise(labels, scores, Label::Forgotten, Label::Holdout)?;
    Ok(MetricValues(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatedOn {
    /// Held-out split of the classifier.
    Test,
    /// Every sample of the view.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `remind-<classifier>` or a baseline name.
    pub method: String,
    pub display_name: String,
    pub arm: ViewSelector,
    pub evaluated_on: EvaluatedOn,
    pub samples: usize,
    /// `None` when the method could not run (missing oracle capability).
    pub metrics: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub config_hash: String,
    pub seed: u64,
    pub oracle_identity: String,
    pub fpr_cap: f64,
    pub partial_auc: bool,
    pub cache: Option<CacheStats>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn arm_label(arm: ViewSelector) -> &'static str {
    match arm {
        ViewSelector::Original => "orig",
        ViewSelector::Paraphrased => "reph",
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl EvaluationReport {
    pub fn row(&self, method: &str, arm: ViewSelector) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.arm == arm)
    }

    /// `report.csv`: one line per method and arm.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method", "arm", "evaluated_on", "samples"];
        header.extend(METRIC_COLUMNS);
        header.push("config_hash");
        let csv_err = |e: csv::Error| Error::Data(format!("rendering report: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.method.clone(),
                arm_label(r.arm).to_string(),
                match r.evaluated_on {
                    EvaluatedOn::Test => "test".into(),
                    EvaluatedOn::All => "all".into(),
                },
                r.samples.to_string(),
            ];
            let values = r.metrics.map(|m| m.0).unwrap_or([None; 12]);
            rec.extend(values.iter().map(|v| cell(*v)));
            rec.push(self.config_hash.clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("rendering report: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    fn arms(&self) -> Vec<ViewSelector> {
        let mut arms = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        arms
    }

    fn methods(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|(m, _)| *m == r.method) {
                out.push((&r.method, &r.display_name));
            }
        }
        out
    }

    fn arm_table(&self, title: &str, columns: &[&str]) -> String {
        let arms = self.arms();
        let methods = self.methods();
        let name_w = methods.iter().map(|(_, d)| d.len()).max().unwrap_or(6).max(6);
        let col_w = columns.iter().map(|c| c.len()).max().unwrap_or(8).max(10);
        let mut s = format!("{title}\n");
        let _ = write!(s, "{:name_w$}", "Method");
        for c in columns {
            for a in &arms {
                let head = format!("{c} {}", arm_label(*a));
                let _ = write!(s, "  {head:>w$}", w = col_w + 5);
            }
        }
        s.push('\n');
        for (method, display) in &methods {
            let _ = write!(s, "{display:name_w$}");
            for c in columns {
                for a in &arms {
                    let v = self.row(method, *a).and_then(|r| r.metrics).and_then(|m| m.get(c));
                    let _ = write!(s, "  {:>w$}", cell(v), w = col_w + 5);
                }
            }
            s.push('\n');
        }
        s
    }

    /// `report.txt`: the AUC table, the low-FPR table and a detailed table
    /// per arm, followed by notes.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.arm_table("AUC metrics", &METRIC_COLUMNS[..4]));
        s.push('\n');
        s.push_str(&self.arm_table("Low-FPR metrics", &METRIC_COLUMNS[4..7]));
        for arm in self.arms() {
            s.push('\n');
            let _ = writeln!(s, "Detailed scores ({})", arm_label(arm));
            let name_w = self.rows.iter().map(|r| r.display_name.len()).max().unwrap_or(6).max(6);
            let _ = write!(s, "{:name_w$}  {:>7}", "Method", "samples");
            for c in METRIC_COLUMNS {
                let _ = write!(s, "  {c:>w$}", w = c.len().max(9));
            }
            s.push('\n');
            for r in self.rows.iter().filter(|r| r.arm == arm) {
                let _ = write!(s, "{:name_w$}  {:>7}", r.display_name, r.samples);
                for (i, c) in METRIC_COLUMNS.iter().enumerate() {
                    let v = r.metrics.and_then(|m| m.0[i]);
                    let _ = write!(s, "  {:>w$}", cell(v), w = c.len().max(9));
                }
                s.push('\n');
            }
        }
        s.push('\n');
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "oracle: {}", self.oracle_identity);
        let low = if self.partial_auc {
            format!("standardized partial AUC over FPR [0, {}]", self.fpr_cap)
        } else {
            format!("TPR at FPR = {}, interpolated", self.fpr_cap)
        };
        let _ = writeln!(s, "*_at_1_fp columns: {low}.");
        s.push_str("Classifier rows are evaluated on the held-out split; baseline rows on every sample of the view.\n");
        s.push_str("Baselines give one scalar score, so their multi_class_auc is 50 by convention.\n");
        s.push_str("Baseline scores are oriented so that higher means more memorized; no per-dataset flipping.\n");
        s.push_str("overall_score is the macro F1; n/a marks a metric or method that could not be computed.\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = self.to_csv()?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        write("report.csv", &csv)?;
        write("report.txt", &self.render_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> MetricOptions {
        MetricOptions {
            fpr_cap: 0.01,
            partial_auc: false,
        }
    }

    #[test]
    fn perfect_classifier() {
        let labels = [Label::Retained, Label::Forgotten, Label::Holdout, Label::Retained];
        let probs = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]];
        let m = classifier_metrics(
            &labels,
            &probs,
            &[Label::Retained, Label::Forgotten, Label::Holdout, Label::Retained],
            &opts(),
        )
        .unwrap();
        for v in m.0 {
            assert_eq!(v, Some(100.0));
        }
    }

    #[test]
    fn scalar_rows_fix_multiclass_at_fifty() {
        let labels = [Label::Retained, Label::Forgotten, Label::Holdout];
        let m = scalar_metrics(&labels, &[3.0, 2.0, 1.0], &opts()).unwrap();
        assert_eq!(m.get("multi_class_auc"), Some(50.0));
        assert_eq!(m.get("retain_vs_all_auc"), Some(100.0));
        assert_eq!(m.get("holdout_vs_all_auc"), Some(0.0));
        assert_eq!(m.get("accuracy"), None);
    }

    #[test]
    fn csv_schema() {
        let report = EvaluationReport {
            rows: vec![ReportRow {
                method: "loss".into(),
                display_name: "Loss based".into(),
                arm: ViewSelector::Original,
                evaluated_on: EvaluatedOn::All,
                samples: 3,
                metrics: None,
            }],
            config_hash: "abc".into(),
            seed: 1,
            oracle_identity: "x".into(),
            fpr_cap: 0.01,
            partial_auc: false,
            cache: None,
            started_unix: 0,
            finished_unix: 0,
        };
        let csv = report.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,arm,evaluated_on,samples,retain_vs_all_auc,forget_vs_all_auc,holdout_vs_all_auc,\
             multi_class_auc,retain_vs_all_auc_at_1_fp,forget_vs_all_auc_at_1_fp,holdout_vs_all_auc_at_1_fp,\
             retained_vs_forgotten,forgotten_vs_holdout,overall_score,accuracy,f1,config_hash"
        );
        assert!(lines.next().unwrap().starts_with("loss,orig,all,3,n/a,"));
        assert!(report.render_text().contains("Loss based"));
    }

    #[test]
    fn mean_of_metric_values() {
        let a = MetricValues([Some(1.0); 12]);
        let mut b = MetricValues([Some(3.0); 12]);
        b.0[11] = None;
        let m = MetricValues::mean(&[a, b]);
        assert_eq!(m.0[0], Some(2.0));
        assert_eq!(m.0[11], None);
    }
}
