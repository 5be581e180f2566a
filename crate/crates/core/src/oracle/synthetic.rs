//! Synthetic loss oracle with a prescribed landscape around each sample.
//!
//! Each sample id is assigned a [`Geometry`]. The original text of a sample
//! (passed through [`ScoringContext`]) sits at the landscape centre; any
//! other text is scored from its encoder distance `d` to the original and
//! two pseudo-random numbers `u`, `w` in `[-1, 1]` derived from
//! `(seed, sample id, text)`:
//!
//! * flat: `center_loss + jitter * u`
//! * basin: `center_loss + slope * d + jitter * u`
//! * volatile: `mean_loss + amplitude * w`
//!
//! Losses are floored at zero. Every token of the text receives the same
//! NLL, so the mean equals the landscape value.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LossOracle, LossProfile, OracleCapabilities, PositionStats, ScoringContext};
use crate::ill_features::{euclidean, TextEncoder};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Geometry {
    Flat { center_loss: f64, jitter: f64 },
    Basin { center_loss: f64, slope: f64, jitter: f64 },
    Volatile { mean_loss: f64, amplitude: f64 },
}

impl Geometry {
    pub fn center(&self) -> f64 {
        match *self {
            Geometry::Flat { center_loss, .. } | Geometry::Basin { center_loss, .. } => center_loss,
            Geometry::Volatile { mean_loss, .. } => mean_loss,
        }
    }

    /// Landscape value at encoder distance `distance` with noise draws `u`, `w`.
    pub fn evaluate(&self, distance: f64, u: f64, w: f64) -> f64 {
        match *self {
            Geometry::Flat { center_loss, jitter } => center_loss + jitter * u,
            Geometry::Basin {
                center_loss,
                slope,
                jitter,
            } => center_loss + slope * distance + jitter * u,
            Geometry::Volatile { mean_loss, amplitude } => mean_loss + amplitude * w,
        }
    }

    fn validate(&self) -> Result<()> {
        let values: &[f64] = match self {
            Geometry::Flat { center_loss, jitter } => &[*center_loss, *jitter],
            Geometry::Basin {
                center_loss,
                slope,
                jitter,
            } => &[*center_loss, *slope, *jitter],
            Geometry::Volatile { mean_loss, amplitude } => &[*mean_loss, *amplitude],
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite geometry parameter in {self:?}")));
        }
        Ok(())
    }
}

/// One line of a geometry assignment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryAssignment {
    pub id: String,
    pub geometry: Geometry,
}

pub struct SyntheticOracle {
    seed: u64,
    profiles: BTreeMap<String, Geometry>,
    default: Option<Geometry>,
    encoder: Option<Arc<dyn TextEncoder>>,
    tokenizer: Option<Arc<Tokenizer>>,
    stats_vocab: Option<usize>,
}

impl SyntheticOracle {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            profiles: BTreeMap::new(),
            default: None,
            encoder: None,
            tokenizer: None,
            stats_vocab: None,
        }
    }

    /// Geometry for texts scored without a known sample.
    pub fn with_default(mut self, geometry: Geometry) -> Self {
        self.default = Some(geometry);
        self
    }

    pub fn with_profile(mut self, id: impl Into<String>, geometry: Geometry) -> Self {
        self.profiles.insert(id.into(), geometry);
        self
    }

    pub fn with_encoder(mut self, encoder: Arc<dyn TextEncoder>) -> Self {
        self.encoder = Some(encoder);
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<Tokenizer>) -> Self {
        self.tokenizer = Some(tokenizer);
        self
    }

    /// Advertise a uniform next-token distribution over `vocab` tokens.
    pub fn with_uniform_stats(mut self, vocab: usize) -> Self {
        self.stats_vocab = Some(vocab);
        self
    }

    /// Reads `{"id": ..., "geometry": {"kind": ..., ...}}` lines.
    pub fn load_profiles(mut self, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let a: GeometryAssignment = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("{}:{}: bad geometry: {e}", path.display(), i + 1)))?;
            a.geometry.validate()?;
            self.profiles.insert(a.id, a.geometry);
        }
        Ok(self)
    }

    pub fn profile(&self, id: &str) -> Option<&Geometry> {
        self.profiles.get(id)
    }

    fn noise(&self, sample_id: &str, text: &str, tag: u8) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(sample_id.as_bytes());
        h.update([0xff, tag]);
        h.update(text.as_bytes());
        let digest = h.finalize();
        let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let unit = (word >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * unit - 1.0
    }

    fn token_count(&self, text: &str) -> Result<usize> {
        let n = match &self.tokenizer {
            Some(t) => t.encode(text)?.len(),
            None => text.split_whitespace().count(),
        };
        if n == 0 {
            return Err(Error::Data("text has no tokens".into()));
        }
        Ok(n)
    }

    fn distance(&self, a: &str, b: &str) -> Result<f64> {
        match &self.encoder {
            Some(enc) => Ok(euclidean(&enc.encode(a)?, &enc.encode(b)?)),
            None => Ok(0.0),
        }
    }

    fn landscape_loss(&self, ctx: Option<&ScoringContext<'_>>, text: &str) -> Result<f64> {
        let sample_id = ctx.map_or("", |c| c.sample_id);
        let geometry = self
            .profiles
            .get(sample_id)
            .or(self.default.as_ref())
            .ok_or_else(|| Error::Config(format!("no synthetic geometry for sample `{sample_id}`")))?;
        let loss = match ctx {
            Some(c) if c.original_text == text => geometry.center(),
            Some(c) => {
                let d = self.distance(c.original_text, text)?;
                geometry.evaluate(d, self.noise(sample_id, text, 0), self.noise(sample_id, text, 1))
            }
            None => geometry.evaluate(0.0, self.noise("", text, 0), self.noise("", text, 1)),
        };
        Ok(loss.max(0.0))
    }

    fn profile_for(&self, ctx: Option<&ScoringContext<'_>>, text: &str) -> Result<LossProfile> {
        let loss = self.landscape_loss(ctx, text)?;
        LossProfile::new(vec![loss; self.token_count(text)?])
    }
}

impl LossOracle for SyntheticOracle {
    fn identity(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.profiles).unwrap_or_default());
        h.update(serde_json::to_string(&self.default).unwrap_or_default());
        format!(
            "synthetic:seed={}:profiles={}",
            self.seed,
            &hex::encode(h.finalize())[..16]
        )
    }

    fn capabilities(&self) -> OracleCapabilities {
        OracleCapabilities {
            vocab_distribution_stats: self.stats_vocab.is_some(),
            generation: true,
        }
    }

    fn context_sensitive(&self) -> bool {
        true
    }

    fn score_text(&self, text: &str) -> Result<LossProfile> {
        self.profile_for(None, text)
    }

    fn score_in_context(&self, ctx: &ScoringContext<'_>, text: &str) -> Result<LossProfile> {
        self.profile_for(Some(ctx), text)
    }

    fn distribution_stats(&self, text: &str) -> Result<Vec<PositionStats>> {
        let n = self.stats_vocab.ok_or(Error::Capability {
            capability: "vocab_distribution_stats",
            requester: "MIN-K%++",
        })?;
        let stats = PositionStats {
            mean: -(n as f64).ln(),
            std: 0.0,
        };
        Ok(vec![stats; self.token_count(text)?])
    }

    /// Echoes the last `max_new_tokens` tokens of the prompt.
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        if max_new_tokens == 0 {
            return Ok(String::new());
        }
        match &self.tokenizer {
            Some(t) => {
                let ids = t.encode(prompt)?;
                t.decode(&ids[ids.len().saturating_sub(max_new_tokens)..])
            }
            None => {
                let words: Vec<&str> = prompt.split_whitespace().collect();
                Ok(words[words.len().saturating_sub(max_new_tokens)..].join(" "))
            }
        }
    }
}
