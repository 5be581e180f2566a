//! Input-loss-landscape features.
//!
//! With `l0` the original loss, `l_j` the neighbour losses, `d_j` the encoder
//! distance from the original to neighbour `j` and
//! `g_j = |l_j - l0| / d_j` (zero when `d_j < 1e-8`), the 14 features are:
//!
//! | # | name | value |
//! |---|------|-------|
//! | f1 | l_orig | `l0` |
//! | f2 | mu_neigh | mean `l_j` |
//! | f3 | l_max | max `l_j` |
//! | f4 | l_min | min `l_j` |
//! | f5 | sigma_neigh | std `l_j` |
//! | f6 | var_neigh | var `l_j` |
//! | f7 | delta_mu | f2 - f1 |
//! | f8 | delta_max | f3 - f1 |
//! | f9 | delta_min | f4 - f1 |
//! | f10 | var_delta | var `|l_j - l0|` |
//! | f11 | mu_grad | mean `g_j` |
//! | f12 | grad_max | max `g_j` |
//! | f13 | var_grad | var `g_j` |
//! | f14 | volatility | mean `|l_(k+1) - l_(k)|` with neighbours sorted by `d_j` |
//!
//! Variances divide by the neighbour count.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding_store::TokenEmbeddingTable;
use crate::oracle::LossProfile;
use crate::tokenizer::Tokenizer;
use crate::{Error, Label, Result};

pub const FEATURE_COUNT: usize = 14;

/// Distances below this contribute a zero finite-difference gradient.
pub const DISTANCE_FLOOR: f64 = 1e-8;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "f9", "f10", "f11", "f12", "f13", "f14",
];

pub const FEATURE_LABELS: [&str; FEATURE_COUNT] = [
    "l_orig",
    "mu_neigh",
    "l_max",
    "l_min",
    "sigma_neigh",
    "var_neigh",
    "delta_mu",
    "delta_max",
    "delta_min",
    "var_delta",
    "mu_grad",
    "grad_max",
    "var_grad",
    "volatility",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IllFeatureVector(pub [f64; FEATURE_COUNT]);

impl IllFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn l_orig(&self) -> f64 {
        self.0[0]
    }
    pub fn mu_neigh(&self) -> f64 {
        self.0[1]
    }
    pub fn l_max(&self) -> f64 {
        self.0[2]
    }
    pub fn l_min(&self) -> f64 {
        self.0[3]
    }
    pub fn sigma_neigh(&self) -> f64 {
        self.0[4]
    }
    pub fn var_neigh(&self) -> f64 {
        self.0[5]
    }
    pub fn delta_mu(&self) -> f64 {
        self.0[6]
    }
    pub fn delta_max(&self) -> f64 {
        self.0[7]
    }
    pub fn delta_min(&self) -> f64 {
        self.0[8]
    }
    pub fn var_delta(&self) -> f64 {
        self.0[9]
    }
    pub fn mu_grad(&self) -> f64 {
        self.0[10]
    }
    pub fn grad_max(&self) -> f64 {
        self.0[11]
    }
    pub fn var_grad(&self) -> f64 {
        self.0[12]
    }
    pub fn volatility(&self) -> f64 {
        self.0[13]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Loss of one neighbour and its encoder distance from the original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborLoss {
    pub loss: f64,
    pub distance: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Computes the feature vector from the original loss and its neighbourhood.
pub fn features_from_losses(orig_loss: f64, neighbors: &[NeighborLoss]) -> Result<IllFeatureVector> {
    if neighbors.len() < 2 {
        return Err(Error::Parameter(format!(
            "feature extraction needs at least 2 neighbours, got {}",
            neighbors.len()
        )));
    }
    if !orig_loss.is_finite() || neighbors.iter().any(|n| !n.loss.is_finite() || !n.distance.is_finite()) {
        return Err(Error::Data("non-finite loss or distance in neighbourhood".into()));
    }

    let losses: Vec<f64> = neighbors.iter().map(|n| n.loss).collect();
    let abs_deltas: Vec<f64> = losses.iter().map(|l| (l - orig_loss).abs()).collect();
    let grads: Vec<f64> = neighbors
        .iter()
        .zip(&abs_deltas)
        .map(|(n, delta)| {
            if n.distance < DISTANCE_FLOOR {
                0.0
            } else {
                delta / n.distance
            }
        })
        .collect();

    let mut by_distance: Vec<&NeighborLoss> = neighbors.iter().collect();
    by_distance.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.loss.total_cmp(&b.loss))
    });
    let volatility = by_distance
        .windows(2)
        .map(|w| (w[1].loss - w[0].loss).abs())
        .sum::<f64>()
        / (by_distance.len() - 1) as f64;

    let mu = mean(&losses);
    let hi = max(&losses);
    let lo = min(&losses);
    let var = population_variance(&losses);
    Ok(IllFeatureVector([
        orig_loss,
        mu,
        hi,
        lo,
        var.sqrt(),
        var,
        mu - orig_loss,
        hi - orig_loss,
        lo - orig_loss,
        population_variance(&abs_deltas),
        mean(&grads),
        max(&grads),
        population_variance(&grads),
        volatility,
    ]))
}

/// Maps text to a fixed-length vector; the distance space for the
/// finite-difference gradient features.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of the embedding-table rows of the text's tokens.
pub struct MeanPooledEncoder {
    table: Arc<TokenEmbeddingTable>,
    tokenizer: Arc<Tokenizer>,
}

impl MeanPooledEncoder {
    pub fn new(table: Arc<TokenEmbeddingTable>, tokenizer: Arc<Tokenizer>) -> Self {
        Self { table, tokenizer }
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Data("cannot encode a text with no tokens".into()));
        }
        let mut acc = vec![0.0; self.table.dim()];
        for &id in ids {
            if !self.table.contains(id) {
                return Err(Error::Data(format!("token id {id} outside the embedding table")));
            }
            for (a, v) in acc.iter_mut().zip(self.table.embedding(id)) {
                *a += f64::from(*v);
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

impl TextEncoder for MeanPooledEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_ids(&self.tokenizer.encode(text)?)
    }
}

/// Embedding endpoint: POST `{"model": ..., "input": ...}`, response
/// `{"data": [{"embedding": [...]}]}`.
pub struct RemoteEncoder {
    url: String,
    model: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            model: model.into(),
            dim,
            agent,
        }
    }
}

impl TextEncoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({ "model": self.model, "input": text }).to_string();
        let text = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| Error::Oracle(format!("embedding endpoint {}: {e}", self.url)))?;
        let resp: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Oracle(format!("malformed embedding response: {e}")))?;
        let vec = resp
            .pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Oracle("embedding response lacks data[0].embedding".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::Oracle("non-numeric embedding component".into()))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vec.len() != self.dim {
            return Err(Error::Oracle(format!(
                "embedding endpoint returned {} components, expected {}",
                vec.len(),
                self.dim
            )));
        }
        Ok(vec)
    }
}

/// Encodes the original and every neighbour text, then computes features.
pub fn extract_features(
    orig: &LossProfile,
    neighbors: &[(LossProfile, String)],
    original_text: &str,
    encoder: &dyn TextEncoder,
) -> Result<IllFeatureVector> {
    if neighbors.len() < 2 {
        return Err(Error::Parameter(format!(
            "feature extraction needs at least 2 neighbours, got {}",
            neighbors.len()
        )));
    }
    let anchor = encoder.encode(original_text)?;
    let losses = neighbors
        .iter()
        .map(|(profile, text)| {
            let distance = if text == original_text {
                0.0
            } else {
                euclidean(&anchor, &encoder.encode(text)?)
            };
            Ok(NeighborLoss {
                loss: profile.mean_nll(),
                distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    features_from_losses(orig.mean_nll(), &losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub label: Label,
    pub features: IllFeatureVector,
}

/// Writes `sample_id,label,f1..f14`.
pub fn write_features_csv(path: impl AsRef<Path>, rows: &[FeatureRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["sample_id", "label"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        let mut rec = vec![row.sample_id.clone(), row.label.to_string()];
        rec.extend(row.features.0.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<&str> = ["sample_id", "label"].into_iter().chain(FEATURE_NAMES).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::format(
            path,
            1,
            format!("expected header `{}`", expected.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let label: Label = rec[1]
            .parse()
            .map_err(|_| Error::format(path, line, format!("bad label `{}`", &rec[1])))?;
        let mut f = [0.0; FEATURE_COUNT];
        for (j, slot) in f.iter_mut().enumerate() {
            *slot = rec[j + 2]
                .parse()
                .map_err(|_| Error::format(path, line, format!("bad value in column {}", FEATURE_NAMES[j])))?;
        }
        rows.push(FeatureRow {
            sample_id: rec[0].to_string(),
            label,
            features: IllFeatureVector(f),
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::format(path, line, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nl(loss: f64, distance: f64) -> NeighborLoss {
        NeighborLoss { loss, distance }
    }

    #[test]
    fn flat_field_is_all_zero_beyond_levels() {
        let f = features_from_losses(2.0, &[nl(2.0, 0.1); 4]).unwrap();
        assert_eq!(
            f.0,
            [2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn zero_distance_neighbour_has_zero_gradient() {
        let f = features_from_losses(1.0, &[nl(1.5, 0.0), nl(2.0, 0.5), nl(1.0, 1e-12)]).unwrap();
        assert!(f.is_finite());
        assert_eq!(f.grad_max(), 2.0);
        assert!((f.mu_grad() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn needs_two_neighbours() {
        assert!(matches!(
            features_from_losses(1.0, &[nl(1.0, 0.1)]),
            Err(Error::Parameter(_))
        ));
        assert!(features_from_losses(f64::NAN, &[nl(1.0, 0.1), nl(1.0, 0.2)]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let rows = vec![
            FeatureRow {
                sample_id: "a,1".into(),
                label: Label::Forgotten,
                features: IllFeatureVector([0.1; 14]),
            },
            FeatureRow {
                sample_id: "b".into(),
                label: Label::Holdout,
                features: IllFeatureVector(std::array::from_fn(|i| i as f64 / 3.0)),
            },
        ];
        write_features_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,label,f1,f2,f3,f4,f5,f6,f7,f8,f9,f10,f11,f12,f13,f14\n"));
        assert_eq!(read_features_csv(&path).unwrap(), rows);
    }

    #[test]
    fn mean_pooled_encoder() {
        let table = Arc::new(
            TokenEmbeddingTable::from_rows(
                vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()],
                vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]],
                1,
            )
            .unwrap(),
        );
        let tok = Arc::new(Tokenizer::whitespace(&table).unwrap());
        let enc = MeanPooledEncoder::new(table, tok);
        assert_eq!(enc.encode("a").unwrap(), vec![1.0, 0.0]);
        assert_eq!(enc.encode("a b").unwrap(), vec![0.5, 0.5]);
        assert!(matches!(enc.encode("   "), Err(Error::Data(_))));
    }

    fn neighbourhood() -> impl Strategy<Value = (f64, Vec<(f64, f64)>)> {
        (
            0.0f64..5.0,
            proptest::collection::vec((0.0f64..5.0, 0.0f64..2.0), 2..20),
        )
    }

    proptest! {
        #[test]
        fn structural_invariants((l0, ns) in neighbourhood()) {
            let ns: Vec<_> = ns.into_iter().map(|(l, d)| nl(l, d)).collect();
            let f = features_from_losses(l0, &ns).unwrap();
            prop_assert!(f.is_finite());
            prop_assert!((f.sigma_neigh().powi(2) - f.var_neigh()).abs() < 1e-9);
            prop_assert!(f.l_min() <= f.mu_neigh() + 1e-12 && f.mu_neigh() <= f.l_max() + 1e-12);
            prop_assert!(f.delta_min() <= f.delta_mu() + 1e-12 && f.delta_mu() <= f.delta_max() + 1e-12);
        }

        #[test]
        fn permutation_invariance((l0, ns) in neighbourhood(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ns: Vec<_> = ns.into_iter().map(|(l, d)| nl(l, d)).collect();
            let mut shuffled = ns.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = features_from_losses(l0, &ns).unwrap();
            let b = features_from_losses(l0, &shuffled).unwrap();
            for i in 0..FEATURE_COUNT {
                prop_assert!((a.0[i] - b.0[i]).abs() <= 1e-9 * (1.0 + a.0[i].abs()), "feature {}", i + 1);
            }
        }

        #[test]
        fn scaling_covariance((l0, ns) in neighbourhood(), c in 0.1f64..10.0) {
            let ns: Vec<_> = ns.into_iter().map(|(l, d)| nl(l, d)).collect();
            let scaled: Vec<_> = ns.iter().map(|n| nl(n.loss * c, n.distance)).collect();
            let a = features_from_losses(l0, &ns).unwrap();
            let b = features_from_losses(l0 * c, &scaled).unwrap();
            for i in 0..FEATURE_COUNT {
                let power = if matches!(i, 5 | 9 | 12) { 2 } else { 1 };
                let expected = a.0[i] * c.powi(power);
                prop_assert!((b.0[i] - expected).abs() <= 1e-9 * (1.0 + expected.abs()), "feature {}", i + 1);
            }
        }
    }
}
