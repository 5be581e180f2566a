//! Black-box unlearning audit based on the geometry of the loss landscape
//! around each input.
//!
//! The pipeline perturbs every sample by swapping tokens for their
//! embedding-space nearest neighbours, scores the original and its variants
//! through a loss oracle, summarises the resulting neighbourhood as a
//! 14-feature vector and classifies the sample as retained, forgotten or
//! holdout. Seven pointwise baselines and a shared metrics harness are
//! provided for comparison.

pub mod baselines;
pub mod classifiers;
pub mod datasets;
pub mod embedding_store;
mod error;
pub mod ill_features;
pub mod metrics;
pub mod oracle;
pub mod perturbation;
pub mod runner;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Membership class of a sample with respect to the audited model.
///
/// The declaration order is the fixed class order used by every
/// probability triple in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Retained,
    Forgotten,
    Holdout,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Retained, Label::Forgotten, Label::Holdout];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Retained => "retained",
            Label::Forgotten => "forgotten",
            Label::Holdout => "holdout",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retained" | "retain" => Ok(Label::Retained),
            "forgotten" | "forget" => Ok(Label::Forgotten),
            "holdout" => Ok(Label::Holdout),
            other => Err(Error::Parameter(format!("unknown label `{other}`"))),
        }
    }
}
