//! Multinomial logistic regression and random forest over feature vectors.
//!
//! Both models emit probability triples in the fixed class order
//! `[retained, forgotten, holdout]`. Inputs are standardised with
//! statistics taken from the training rows only.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ill_features::FeatureRow;
use crate::{Error, Label, Result};

pub const MODEL_FORMAT: &str = "remind-classifier";
pub const MODEL_VERSION: u32 = 1;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub features: Vec<f64>,
}

/// Per-feature `(mean, std)`; a zero std is stored as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(rows: &[Example]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| Error::Data("cannot standardise an empty dataset".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    rows: Vec<Example>,
    standardization: Standardization,
}

impl LabeledDataset {
    /// Validates ids and features, then standardises on these rows.
    pub fn new(rows: Vec<Example>) -> Result<Self> {
        let dim = rows.first().map(|r| r.features.len()).unwrap_or(0);
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", r.id)));
            }
            if r.features.len() != dim {
                return Err(Error::Data(format!(
                    "row {i} (`{}`) has {} features, expected {dim}",
                    r.id,
                    r.features.len()
                )));
            }
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "row {i} (`{}`) has a non-finite value in feature {}",
                    r.id,
                    j + 1
                )));
            }
        }
        let standardization = if rows.is_empty() {
            Standardization {
                mean: vec![],
                std: vec![],
            }
        } else {
            Standardization::fit(&rows)?
        };
        Ok(Self { rows, standardization })
    }

    pub fn from_feature_rows(rows: &[FeatureRow]) -> Result<Self> {
        Self::new(
            rows.iter()
                .map(|r| Example {
                    id: r.sample_id.clone(),
                    label: r.label,
                    features: r.features.0.to_vec(),
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> &[Example] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for r in &self.rows {
            c[r.label.index()] += 1;
        }
        c
    }
}

/// Stratified split. Each class sends a largest-remainder share of
/// `test_size` to the test part, at least one row to each side.
pub fn split(data: &LabeledDataset, test_size: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_size > 0.0 && test_size < 1.0) {
        return Err(Error::Split(format!("test_size must lie in (0, 1), got {test_size}")));
    }
    let counts = data.class_counts();
    let present: Vec<Label> = Label::ALL.into_iter().filter(|c| counts[c.index()] > 0).collect();
    if let Some(c) = present.iter().find(|c| counts[c.index()] < 2) {
        return Err(Error::Split(format!("class {c} has fewer than 2 rows")));
    }

    let target = (data.len() as f64 * test_size).round() as usize;
    let mut alloc = [0usize; CLASSES];
    let mut remainders = Vec::new();
    for c in &present {
        let exact = counts[c.index()] as f64 * test_size;
        alloc[c.index()] = exact.floor() as usize;
        remainders.push((exact - exact.floor(), c.index()));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = alloc.iter().sum();
    for &(_, idx) in remainders.iter().take(target.saturating_sub(assigned)) {
        alloc[idx] += 1;
    }
    for c in &present {
        let i = c.index();
        alloc[i] = alloc[i].clamp(1, counts[i] - 1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in &present {
        let mut members: Vec<&Example> = data.rows.iter().filter(|r| r.label == *c).collect();
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        let k = alloc[c.index()];
        test.extend(members[..k].iter().map(|r| (*r).clone()));
        train.extend(members[k..].iter().map(|r| (*r).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((LabeledDataset::new(train)?, LabeledDataset::new(test)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    LogisticRegression,
    RandomForest,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::LogisticRegression => "logistic-regression",
            ClassifierKind::RandomForest => "random-forest",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ClassifierKind::LogisticRegression => "Logistic Regression",
            ClassifierKind::RandomForest => "Random Forest",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic-regression" => Ok(ClassifierKind::LogisticRegression),
            "random-forest" => Ok(ClassifierKind::RandomForest),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Fixed gradient step; `None` uses the inverse of a curvature bound of
    /// the standardised objective, which keeps descent monotone.
    pub step: Option<f64>,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 5000,
            tol: 1e-7,
            step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(dim))`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 12,
            min_leaf: 2,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyperparams {
    pub logistic: LogisticParams,
    pub forest: ForestParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Model {
    /// One row per class: feature weights followed by the intercept.
    LogisticRegression {
        weights: Vec<Vec<f64>>,
    },
    RandomForest {
        trees: Vec<Tree>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: Hyperparams,
    pub standardization: Standardization,
    pub model: Model,
}

pub fn train(
    data: &LabeledDataset,
    kind: ClassifierKind,
    params: &Hyperparams,
    seed: u64,
) -> Result<TrainedClassifier> {
    if data.len() < 10 {
        return Err(Error::Training(format!("need at least 10 rows, got {}", data.len())));
    }
    if data.class_counts().iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::Training("training data contains a single class".into()));
    }
    let std = data.standardization().clone();
    let x: Vec<Vec<f64>> = data.rows().iter().map(|r| std.apply(&r.features)).collect();
    let y: Vec<usize> = data.rows().iter().map(|r| r.label.index()).collect();
    let model = match kind {
        ClassifierKind::LogisticRegression => {
            let fit = fit_logistic(&x, &y, &params.logistic)?;
            log::debug!(
                "logistic regression: {} iterations, final objective {:?}",
                fit.iterations,
                fit.loss_trace.last()
            );
            Model::LogisticRegression { weights: fit.weights }
        }
        ClassifierKind::RandomForest => Model::RandomForest {
            trees: fit_forest(&x, &y, &params.forest, seed)?,
        },
    };
    Ok(TrainedClassifier {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        seed,
        params: params.clone(),
        standardization: std,
        model,
    })
}

impl TrainedClassifier {
    pub fn kind(&self) -> ClassifierKind {
        match self.model {
            Model::LogisticRegression { .. } => ClassifierKind::LogisticRegression,
            Model::RandomForest { .. } => ClassifierKind::RandomForest,
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; CLASSES]> {
        if x.len() != self.standardization.mean.len() {
            return Err(Error::Data(format!(
                "expected {} features, got {}",
                self.standardization.mean.len(),
                x.len()
            )));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in feature {}", j + 1)));
        }
        let z = self.standardization.apply(x);
        Ok(match &self.model {
            Model::LogisticRegression { weights } => softmax(&logits(weights, &z)),
            Model::RandomForest { trees } => forest_proba(trees, &z),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        let p = self.predict_proba(x)?;
        Ok(Label::from_index(argmax(&p)).expect("three classes"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let model: Self = serde_json::from_str(&text)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                model.format,
                model.version
            )));
        }
        Ok(model)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn logits(weights: &[Vec<f64>], z: &[f64]) -> [f64; CLASSES] {
    let mut out = [0.0; CLASSES];
    for (o, w) in out.iter_mut().zip(weights) {
        let (bias, coef) = w.split_last().expect("non-empty weight row");
        *o = coef.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + bias;
    }
    out
}

fn softmax(logits: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

pub(crate) struct LogisticFit {
    pub weights: Vec<Vec<f64>>,
    /// Objective value every 100 iterations, then the final value.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
}

fn logistic_objective(weights: &[Vec<f64>], x: &[Vec<f64>], y: &[usize], l2: f64) -> f64 {
    let n = x.len() as f64;
    let ce: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let l = logits(weights, xi);
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - l[yi]
        })
        .sum::<f64>()
        / n;
    let penalty: f64 = weights
        .iter()
        .map(|w| w[..w.len() - 1].iter().map(|v| v * v).sum::<f64>())
        .sum();
    ce + 0.5 * l2 * penalty
}

/// Full-batch gradient descent on mean cross-entropy plus an L2 penalty on
/// the non-intercept weights.
pub(crate) fn fit_logistic(x: &[Vec<f64>], y: &[usize], params: &LogisticParams) -> Result<LogisticFit> {
    let dim = x[0].len();
    let n = x.len() as f64;
    // softmax cross-entropy curvature is at most half the largest eigenvalue
    // of X'X/n, bounded by the trace (mean squared norm of augmented rows)
    let mean_sq_norm = x
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum::<f64>()
        / n;
    let step = params.step.unwrap_or(1.0 / (0.5 * mean_sq_norm + params.l2));
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Training(format!("invalid step size {step}")));
    }

    let mut weights = vec![vec![0.0; dim + 1]; CLASSES];
    let mut loss = logistic_objective(&weights, x, y, params.l2);
    let mut trace = vec![loss];
    let mut iterations = 0;
    for it in 1..=params.max_iter {
        let mut grad = vec![vec![0.0; dim + 1]; CLASSES];
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax(&logits(&weights, xi));
            for c in 0..CLASSES {
                let r = p[c] - if c == yi { 1.0 } else { 0.0 };
                let g = &mut grad[c];
                for (gj, xj) in g.iter_mut().zip(xi) {
                    *gj += r * xj;
                }
                g[dim] += r;
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            for j in 0..=dim {
                let reg = if j < dim { params.l2 * w[j] } else { 0.0 };
                w[j] -= step * (g[j] / n + reg);
            }
        }
        let next = logistic_objective(&weights, x, y, params.l2);
        iterations = it;
        let converged = (loss - next).abs() < params.tol;
        loss = next;
        if it % 100 == 0 {
            trace.push(loss);
        }
        if converged {
            break;
        }
    }
    trace.push(loss);
    Ok(LogisticFit {
        weights,
        loss_trace: trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        distribution: [f64; CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_distribution(&self, z: &[f64]) -> [f64; CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { distribution } => return *distribution,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if z[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

/// Soft votes (each tree splits one vote by its leaf's class fractions),
/// Laplace smoothed as `(votes + 1) / (trees + 3)`.
fn forest_proba(trees: &[Tree], z: &[f64]) -> [f64; CLASSES] {
    let mut votes = [0.0; CLASSES];
    for t in trees {
        let d = t.leaf_distribution(z);
        for c in 0..CLASSES {
            votes[c] += d[c];
        }
    }
    let denom = trees.len() as f64 + CLASSES as f64;
    votes.map(|v| (v + 1.0) / denom)
}

fn fit_forest(x: &[Vec<f64>], y: &[usize], params: &ForestParams, seed: u64) -> Result<Vec<Tree>> {
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::Training("forest needs n_trees >= 1 and min_leaf >= 1".into()));
    }
    let dim = x[0].len();
    let mtry = params
        .max_features
        .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
        .clamp(1, dim);
    Ok((0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let sample: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            let mut builder = TreeBuilder {
                x,
                y,
                params,
                mtry,
                rng,
                nodes: Vec::new(),
            };
            builder.grow(sample, 0);
            Tree { nodes: builder.nodes }
        })
        .collect())
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

fn gini(counts: &[usize; CLASSES], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let mut counts = [0usize; CLASSES];
        for &i in &idx {
            counts[self.y[i]] += 1;
        }
        let node_id = self.nodes.len();
        let leaf = Node::Leaf {
            distribution: counts.map(|c| c as f64 / idx.len() as f64),
        };
        self.nodes.push(leaf);

        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf {
            return node_id;
        }
        let Some((feature, threshold)) = self.best_split(&idx, &counts) else {
            return node_id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[node_id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        node_id
    }

    fn best_split(&mut self, idx: &[usize], counts: &[usize; CLASSES]) -> Option<(usize, f64)> {
        let dim = self.x[0].len();
        let mut features: Vec<usize> = (0..dim).collect();
        let candidates = features.partial_shuffle(&mut self.rng, self.mtry).0.to_vec();

        let n = idx.len();
        let parent = gini(counts, n);
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        for f in candidates {
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = [0usize; CLASSES];
            for k in 0..n - 1 {
                left[self.y[order[k]]] += 1;
                let (lo, hi) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                let n_left = k + 1;
                if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let mut right = *counts;
                for c in 0..CLASSES {
                    right[c] -= left[c];
                }
                let weighted =
                    (n_left as f64 * gini(&left, n_left) + (n - n_left) as f64 * gini(&right, n - n_left)) / n as f64;
                let gain = parent - weighted;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: usize, label: Label, features: Vec<f64>) -> Example {
        Example {
            id: format!("s{id:04}"),
            label,
            features,
        }
    }

    fn separable(n: usize, seed: u64) -> LabeledDataset {
        // two classes split by x0 + x1 = 0 with margin >= 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Retained } else { Label::Forgotten };
                let sign = if label == Label::Retained { 1.0 } else { -1.0 };
                let along: f64 = rng.random_range(-3.0..3.0);
                let off: f64 = rng.random_range(1.0..3.0);
                let (u, v) = (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);
                ex(i, label, vec![sign * off * u + along * u, sign * off * v - along * v])
            })
            .collect();
        LabeledDataset::new(rows).unwrap()
    }

    fn accuracy(model: &TrainedClassifier, data: &LabeledDataset) -> f64 {
        let correct = data
            .rows()
            .iter()
            .filter(|r| model.predict(&r.features).unwrap() == r.label)
            .count();
        correct as f64 / data.len() as f64
    }

    #[test]
    fn logistic_fits_separable_data() {
        let data = separable(200, 1);
        let model = train(&data, ClassifierKind::LogisticRegression, &Hyperparams::default(), 0).unwrap();
        assert!(accuracy(&model, &data) >= 0.99);
    }

    #[test]
    fn logistic_loss_never_increases() {
        let data = separable(120, 2);
        let std = data.standardization();
        let x: Vec<Vec<f64>> = data.rows().iter().map(|r| std.apply(&r.features)).collect();
        let y: Vec<usize> = data.rows().iter().map(|r| r.label.index()).collect();
        let fit = fit_logistic(&x, &y, &LogisticParams::default()).unwrap();
        assert!(fit.iterations > 100);
        for w in fit.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let model = TrainedClassifier {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            seed: 0,
            params: Hyperparams::default(),
            standardization: Standardization {
                mean: vec![0.0; 2],
                std: vec![1.0; 2],
            },
            model: Model::LogisticRegression {
                weights: vec![vec![0.0; 3]; 3],
            },
        };
        assert_eq!(model.predict_proba(&[4.0, -1.0]).unwrap(), [1.0 / 3.0; 3]);
        assert!(model.predict_proba(&[f64::NAN, 0.0]).is_err());
        assert!(model.predict_proba(&[0.0]).is_err());
    }

    #[test]
    fn forest_memorises_repeated_rows() {
        let rows = (0..30)
            .map(|i| {
                let label = Label::from_index(i % 3).unwrap();
                ex(i, label, vec![label.index() as f64, 10.0 - label.index() as f64, 0.5])
            })
            .collect();
        let data = LabeledDataset::new(rows).unwrap();
        let model = train(&data, ClassifierKind::RandomForest, &Hyperparams::default(), 3).unwrap();
        assert_eq!(accuracy(&model, &data), 1.0);
    }

    #[test]
    fn uninformative_features_recover_priors() {
        let priors = [0.5, 0.3, 0.2];
        let rows: Vec<Example> = (0..200)
            .map(|i| {
                let label = if i < 100 {
                    Label::Retained
                } else if i < 160 {
                    Label::Forgotten
                } else {
                    Label::Holdout
                };
                ex(i, label, vec![1.0, 2.0, 3.0])
            })
            .collect();
        let data = LabeledDataset::new(rows).unwrap();
        for kind in [ClassifierKind::LogisticRegression, ClassifierKind::RandomForest] {
            let model = train(&data, kind, &Hyperparams::default(), 5).unwrap();
            let p = model.predict_proba(&[1.0, 2.0, 3.0]).unwrap();
            for c in 0..3 {
                assert!((p[c] - priors[c]).abs() < 0.02, "{kind:?}: {p:?}");
            }
        }
    }

    #[test]
    fn probabilities_are_a_simplex() {
        let data = separable(60, 4);
        for kind in [ClassifierKind::LogisticRegression, ClassifierKind::RandomForest] {
            let model = train(&data, kind, &Hyperparams::default(), 9).unwrap();
            for r in data.rows() {
                let p = model.predict_proba(&r.features).unwrap();
                assert!(p.iter().all(|v| *v >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forest_is_reproducible_and_order_free() {
        let data = separable(80, 6);
        let params = Hyperparams {
            forest: ForestParams {
                n_trees: 25,
                ..ForestParams::default()
            },
            ..Hyperparams::default()
        };
        let a = train(&data, ClassifierKind::RandomForest, &params, 11).unwrap();
        let b = train(&data, ClassifierKind::RandomForest, &params, 11).unwrap();
        assert_eq!(a, b);
        let Model::RandomForest { trees } = &a.model else {
            unreachable!()
        };
        let mut reversed = trees.clone();
        reversed.reverse();
        let z = a.standardization.apply(&data.rows()[0].features);
        let p1 = forest_proba(trees, &z);
        let p2 = forest_proba(&reversed, &z);
        for c in 0..3 {
            assert!((p1[c] - p2[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn training_errors() {
        let one_class = LabeledDataset::new((0..12).map(|i| ex(i, Label::Holdout, vec![i as f64])).collect()).unwrap();
        assert!(matches!(
            train(
                &one_class,
                ClassifierKind::LogisticRegression,
                &Hyperparams::default(),
                0
            ),
            Err(Error::Training(_))
        ));
        let tiny = separable(6, 0);
        assert!(train(&tiny, ClassifierKind::RandomForest, &Hyperparams::default(), 0).is_err());

        let bad = LabeledDataset::new(vec![
            ex(0, Label::Retained, vec![1.0]),
            ex(1, Label::Holdout, vec![f64::NAN]),
        ]);
        let msg = bad.unwrap_err().to_string();
        assert!(msg.contains("row 1") && msg.contains("s0001"), "{msg}");
        assert!(LabeledDataset::new(vec![
            ex(0, Label::Retained, vec![1.0]),
            ex(0, Label::Holdout, vec![2.0])
        ])
        .is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let rows: Vec<Example> = (0..100)
            .map(|i| {
                let label = if i < 34 {
                    Label::Retained
                } else if i < 67 {
                    Label::Forgotten
                } else {
                    Label::Holdout
                };
                ex(i, label, vec![i as f64])
            })
            .collect();
        let data = LabeledDataset::new(rows).unwrap();
        let (train_part, test_part) = split(&data, 0.2, 1).unwrap();
        assert_eq!(test_part.len(), 20);
        assert_eq!(train_part.len(), 80);
        let counts = test_part.class_counts();
        for (c, n) in counts.iter().zip([34.0, 33.0, 33.0]) {
            assert!((*c as f64 - n * 0.2).abs() <= 1.0, "{counts:?}");
        }
        let (train_again, test_again) = split(&data, 0.2, 1).unwrap();
        assert_eq!(test_part, test_again);
        assert_eq!(train_part, train_again);
        let (_, other) = split(&data, 0.2, 2).unwrap();
        assert_ne!(other, test_part);
    }

    #[test]
    fn half_split_of_four_per_class() {
        let rows = (0..12)
            .map(|i| ex(i, Label::from_index(i % 3).unwrap(), vec![0.0]))
            .collect();
        let data = LabeledDataset::new(rows).unwrap();
        let (a, b) = split(&data, 0.5, 0).unwrap();
        assert_eq!(a.class_counts(), [2, 2, 2]);
        assert_eq!(b.class_counts(), [2, 2, 2]);
    }

    #[test]
    fn split_errors() {
        let rows = vec![
            ex(0, Label::Retained, vec![0.0]),
            ex(1, Label::Retained, vec![0.0]),
            ex(2, Label::Holdout, vec![0.0]),
        ];
        let data = LabeledDataset::new(rows).unwrap();
        assert!(matches!(split(&data, 0.5, 0), Err(Error::Split(_))));
        assert!(matches!(split(&data, 1.0, 0), Err(Error::Split(_))));
    }

    #[test]
    fn standardization_uses_train_rows_only() {
        let data = separable(50, 8);
        let (tr, te) = split(&data, 0.2, 3).unwrap();
        let model = train(&tr, ClassifierKind::LogisticRegression, &Hyperparams::default(), 0).unwrap();
        assert_eq!(&model.standardization, tr.standardization());
        assert_ne!(&model.standardization, te.standardization());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let data = separable(40, 3);
        let params = Hyperparams {
            forest: ForestParams {
                n_trees: 5,
                ..ForestParams::default()
            },
            ..Hyperparams::default()
        };
        for kind in [ClassifierKind::LogisticRegression, ClassifierKind::RandomForest] {
            let model = train(&data, kind, &params, 21).unwrap();
            let path = dir.path().join(format!("{}.json", kind.as_str()));
            model.save(&path).unwrap();
            let loaded = TrainedClassifier::load(&path).unwrap();
            assert_eq!(loaded, model);
            assert_eq!(loaded.kind(), kind);
        }
    }
}
