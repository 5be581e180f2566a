//! Pointwise membership-inference scorers used for comparison.
//!
//! Orientation is fixed per method and never flipped to fit the data:
//!
//! | method | higher means |
//! |--------|--------------|
//! | loss | less memorized |
//! | zlib | less memorized |
//! | min-k | more memorized |
//! | min-k++ | more memorized |
//! | rouge-l | more memorized |
//! | spv-mean, spv-max | less memorized |

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::oracle::{LossOracle, LossProfile, PositionStats};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

pub const DEFAULT_MIN_K_PCT: f64 = 20.0;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const ZLIB_LEVEL: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Loss,
    Zlib,
    MinK,
    MinKPlusPlus,
    RougeL,
    SpvMean,
    SpvMax,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 7] = [
        BaselineMethod::Loss,
        BaselineMethod::Zlib,
        BaselineMethod::MinK,
        BaselineMethod::MinKPlusPlus,
        BaselineMethod::RougeL,
        BaselineMethod::SpvMean,
        BaselineMethod::SpvMax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::Loss => "loss",
            BaselineMethod::Zlib => "zlib",
            BaselineMethod::MinK => "min-k",
            BaselineMethod::MinKPlusPlus => "min-k++",
            BaselineMethod::RougeL => "rouge-l",
            BaselineMethod::SpvMean => "spv-mean",
            BaselineMethod::SpvMax => "spv-max",
        }
    }

    /// Row label in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            BaselineMethod::Loss => "Loss based",
            BaselineMethod::Zlib => "Zlib Compression",
            BaselineMethod::MinK => "Min-k%",
            BaselineMethod::MinKPlusPlus => "MIN-K%++",
            BaselineMethod::RougeL => "ROUGE-L F1",
            BaselineMethod::SpvMean => "SPV-MIA (mean)",
            BaselineMethod::SpvMax => "SPV-MIA (max)",
        }
    }

    pub fn orientation(self) -> &'static str {
        match self {
            BaselineMethod::Loss | BaselineMethod::Zlib | BaselineMethod::SpvMean | BaselineMethod::SpvMax => {
                "higher-means-less-memorized"
            }
            BaselineMethod::MinK | BaselineMethod::MinKPlusPlus | BaselineMethod::RougeL => {
                "higher-means-more-memorized"
            }
        }
    }

    /// Maps a raw score so that higher always means more memorized.
    pub fn membership_score(self, raw: f64) -> f64 {
        match self {
            BaselineMethod::Loss | BaselineMethod::Zlib | BaselineMethod::SpvMean | BaselineMethod::SpvMax => -raw,
            BaselineMethod::MinK | BaselineMethod::MinKPlusPlus | BaselineMethod::RougeL => raw,
        }
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown baseline `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub method: BaselineMethod,
    pub sample_id: String,
    pub score: f64,
    pub orientation: String,
}

impl BaselineScore {
    pub fn new(method: BaselineMethod, sample_id: impl Into<String>, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::Data(format!("{method} produced a non-finite score")));
        }
        Ok(Self {
            method,
            sample_id: sample_id.into(),
            score,
            orientation: method.orientation().to_string(),
        })
    }
}

pub fn loss_score(orig: &LossProfile) -> f64 {
    orig.mean_nll()
}

/// Byte length of the zlib stream (level 6) for `text`.
pub fn zlib_compressed_len(text: &str) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Total NLL divided by the compressed length of the text.
pub fn zlib_score(orig: &LossProfile, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::Data("zlib score of an empty text".into()));
    }
    Ok(orig.total_nll() / zlib_compressed_len(text) as f64)
}

fn check_k(k_pct: f64) -> Result<()> {
    if !(k_pct > 0.0 && k_pct <= 100.0) {
        return Err(Error::Parameter(format!("k = {k_pct}% outside (0, 100]")));
    }
    Ok(())
}

fn top_count(k_pct: f64, n: usize) -> usize {
    ((k_pct / 100.0 * n as f64).ceil() as usize).clamp(1, n)
}

/// Negated mean of the `ceil(k% * n)` largest token NLLs.
pub fn min_k_score(orig: &LossProfile, k_pct: f64) -> Result<f64> {
    check_k(k_pct)?;
    let mut nll = orig.token_nll().to_vec();
    nll.sort_by(|a, b| b.total_cmp(a));
    let take = top_count(k_pct, nll.len());
    Ok(-nll[..take].iter().sum::<f64>() / take as f64)
}

/// Mean of the lowest k% of the per-token values
/// `(log p - mean) / max(std, 1e-6)`.
pub fn min_k_pp_score(orig: &LossProfile, stats: &[PositionStats], k_pct: f64) -> Result<f64> {
    check_k(k_pct)?;
    if stats.len() != orig.token_count() {
        return Err(Error::Data(format!(
            "{} position statistics for {} tokens",
            stats.len(),
            orig.token_count()
        )));
    }
    let mut z: Vec<f64> = orig
        .token_nll()
        .iter()
        .zip(stats)
        .map(|(nll, s)| (-nll - s.mean) / s.std.max(SIGMA_FLOOR))
        .collect();
    z.sort_by(f64::total_cmp);
    let take = top_count(k_pct, z.len());
    Ok(z[..take].iter().sum::<f64>() / take as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1 between two token sequences.
pub fn rouge_l_f1<T: PartialEq>(generated: &[T], reference: &[T]) -> f64 {
    if generated.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(generated, reference) as f64;
    let p = lcs / generated.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Splits the text at token `ceil(n/2)`, greedily continues the prefix for
/// as many tokens as the remainder holds and compares the continuation with
/// the remainder.
pub fn rouge_l_f1_score(text: &str, oracle: &dyn LossOracle, tokenizer: &Tokenizer) -> Result<f64> {
    if !oracle.capabilities().generation {
        return Err(Error::Capability {
            capability: "generation",
            requester: "ROUGE-L",
        });
    }
    let ids = tokenizer.encode(text)?;
    let cut = ids.len().div_ceil(2);
    if cut == 0 || cut == ids.len() {
        return Err(Error::Data(format!(
            "text of {} tokens is too short to split into prompt and reference",
            ids.len()
        )));
    }
    let prompt = tokenizer.decode(&ids[..cut])?;
    let reference = &ids[cut..];
    generated_vs_reference(&prompt, reference, oracle, tokenizer)
}

/// As [`rouge_l_f1_score`] with an explicit prompt and reference answer.
pub fn rouge_l_f1_pair(prompt: &str, reference: &str, oracle: &dyn LossOracle, tokenizer: &Tokenizer) -> Result<f64> {
    if !oracle.capabilities().generation {
        return Err(Error::Capability {
            capability: "generation",
            requester: "ROUGE-L",
        });
    }
    let reference = tokenizer.encode(reference)?;
    if prompt.is_empty() || reference.is_empty() {
        return Err(Error::Data("empty prompt or reference".into()));
    }
    generated_vs_reference(prompt, &reference, oracle, tokenizer)
}

fn generated_vs_reference(
    prompt: &str,
    reference: &[u32],
    oracle: &dyn LossOracle,
    tokenizer: &Tokenizer,
) -> Result<f64> {
    let generated = oracle.generate(prompt, reference.len())?;
    let mut gen_ids = tokenizer.encode(&generated)?;
    gen_ids.truncate(reference.len());
    Ok(rouge_l_f1(&gen_ids, reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpvMode {
    Mean,
    Max,
}

impl std::str::FromStr for SpvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(SpvMode::Mean),
            "max" => Ok(SpvMode::Max),
            other => Err(Error::Parameter(format!(
                "unknown SPV mode `{other}`, expected mean or max"
            ))),
        }
    }
}

/// Original loss minus the neighbourhood mean (or maximum).
pub fn spv_mia_simplified(orig: &LossProfile, neighbors: &[LossProfile], mode: SpvMode) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::Parameter("SPV-MIA needs at least one neighbour".into()));
    }
    let losses = neighbors.iter().map(LossProfile::mean_nll);
    let reference = match mode {
        SpvMode::Mean => losses.sum::<f64>() / neighbors.len() as f64,
        SpvMode::Max => losses.fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(orig.mean_nll() - reference)
}
