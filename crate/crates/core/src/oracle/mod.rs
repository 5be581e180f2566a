//! Black-box access to the model under audit.
//!
//! Every oracle returns per-token negative log-likelihoods for a text. The
//! loss used throughout the crate is the mean per-token NLL, so variants
//! whose decoded length differs stay comparable.

mod cache;
mod http;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use cache::{CacheStats, CachedOracle, ResponseCache};
pub use http::{HttpOracle, HttpOracleConfig, RetryPolicy};
pub use synthetic::{Geometry, GeometryAssignment, SyntheticOracle};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct LossProfile {
    token_nll: Vec<f64>,
    mean_nll: f64,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    token_nll: Vec<f64>,
}

impl TryFrom<RawProfile> for LossProfile {
    type Error = Error;

    fn try_from(raw: RawProfile) -> Result<Self> {
        LossProfile::new(raw.token_nll)
    }
}

impl From<LossProfile> for RawProfile {
    fn from(p: LossProfile) -> Self {
        RawProfile { token_nll: p.token_nll }
    }
}

impl LossProfile {
    pub fn new(token_nll: Vec<f64>) -> Result<Self> {
        if token_nll.is_empty() {
            return Err(Error::Data("loss profile has no tokens".into()));
        }
        if let Some(i) = token_nll.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite token loss at position {i}")));
        }
        let mean_nll = token_nll.iter().sum::<f64>() / token_nll.len() as f64;
        Ok(Self { token_nll, mean_nll })
    }

    pub fn from_log_probs(log_probs: &[f64]) -> Result<Self> {
        Self::new(log_probs.iter().map(|lp| -lp).collect())
    }

    pub fn token_count(&self) -> usize {
        self.token_nll.len()
    }

    pub fn token_nll(&self) -> &[f64] {
        &self.token_nll
    }

    pub fn mean_nll(&self) -> f64 {
        self.mean_nll
    }

    pub fn total_nll(&self) -> f64 {
        self.token_nll.iter().sum()
    }
}

/// Mean and standard deviation of the log-probability over the vocabulary
/// at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub mean: f64,
    pub std: f64,
}

impl PositionStats {
    /// Population statistics of a full vocabulary log-probability row.
    pub fn from_log_probs(log_probs: &[f64]) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::Data("empty log-probability row".into()));
        }
        let n = log_probs.len() as f64;
        let mean = log_probs.iter().sum::<f64>() / n;
        let var = log_probs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCapabilities {
    pub vocab_distribution_stats: bool,
    pub generation: bool,
}

impl OracleCapabilities {
    /// Per-token NLL is implied for every oracle.
    pub const fn per_token_nll(&self) -> bool {
        true
    }
}

/// Which sample a scoring request belongs to. Only oracles that model
/// per-sample geometry look at it.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'a> {
    pub sample_id: &'a str,
    pub original_text: &'a str,
}

pub trait LossOracle: Send + Sync {
    /// Stable description of the model behind the oracle; part of every
    /// cache key.
    fn identity(&self) -> String;

    fn capabilities(&self) -> OracleCapabilities;

    fn score_text(&self, text: &str) -> Result<LossProfile>;

    fn score_in_context(&self, _ctx: &ScoringContext<'_>, text: &str) -> Result<LossProfile> {
        self.score_text(text)
    }

    /// Whether [`LossOracle::score_in_context`] depends on the context.
    fn context_sensitive(&self) -> bool {
        false
    }

    fn distribution_stats(&self, _text: &str) -> Result<Vec<PositionStats>> {
        Err(Error::Capability {
            capability: "vocab_distribution_stats",
            requester: "MIN-K%++",
        })
    }

    fn generate(&self, _prompt: &str, _max_new_tokens: usize) -> Result<String> {
        Err(Error::Capability {
            capability: "generation",
            requester: "ROUGE-L",
        })
    }
}

impl<T: LossOracle + ?Sized> LossOracle for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn capabilities(&self) -> OracleCapabilities {
        (**self).capabilities()
    }
    fn score_text(&self, text: &str) -> Result<LossProfile> {
        (**self).score_text(text)
    }
    fn score_in_context(&self, ctx: &ScoringContext<'_>, text: &str) -> Result<LossProfile> {
        (**self).score_in_context(ctx, text)
    }
    fn context_sensitive(&self) -> bool {
        (**self).context_sensitive()
    }
    fn distribution_stats(&self, text: &str) -> Result<Vec<PositionStats>> {
        (**self).distribution_stats(text)
    }
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        (**self).generate(prompt, max_new_tokens)
    }
}
