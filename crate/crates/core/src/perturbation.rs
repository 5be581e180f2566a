//! Embedding-proximity perturbation.
//!
//! Each of the `K` variants is built position by position: with probability
//! `p` the token is replaced by its `j`-th nearest neighbour, `j` uniform on
//! `1..=m`, otherwise it is kept.
//!
//! Randomness is counter based. Variant `k` on redraw attempt `a` reads
//! ChaCha8 (seeded with `seed_from_u64(seed)`) on stream `k | a << 32`;
//! position `i` consumes the two 64-bit words at word offset `4 * i`, the
//! first for the replacement coin and the second for the neighbour rank.
//! A variant therefore depends only on `(seed, k, a, x)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{TokenEmbeddingTable, TokenId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Per-position replacement probability.
    pub p: f64,
    /// Neighbour pool size.
    pub m: usize,
    /// Number of variants.
    pub k: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub resample_cap: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            m: 20,
            k: 15,
            seed: 0,
            max_tokens: 300,
            resample_cap: 10,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self, table: &TokenEmbeddingTable) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Parameter(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.m == 0 || self.m > table.m_max() {
            return Err(Error::Parameter(format!(
                "m must lie in 1..={} (table m_max), got {}",
                table.m_max(),
                self.m
            )));
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Parameter("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSet {
    /// The input after truncation to `max_tokens`.
    pub original: Vec<TokenId>,
    pub variants: Vec<Vec<TokenId>>,
    /// Sorted positions replaced in each variant.
    pub replaced_positions: Vec<Vec<usize>>,
}

impl NeighborhoodSet {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    /// Number of variants that ended up identical to the original.
    pub fn unchanged_variants(&self) -> usize {
        self.replaced_positions.iter().filter(|r| r.is_empty()).count()
    }
}

/// Draws the replacement decision and the neighbour rank for one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PositionDraw {
    pub replace: bool,
    /// 1-based rank in `1..=m`.
    pub rank: usize,
}

fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn bounded(word: u64, m: usize) -> usize {
    ((u128::from(word) * m as u128) >> 64) as usize
}

pub(crate) fn variant_stream(seed: u64, variant: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variant as u64 | ((attempt as u64) << 32));
    rng
}

pub(crate) fn draw_position(rng: &mut ChaCha8Rng, position: usize, p: f64, m: usize) -> PositionDraw {
    rng.set_word_pos(4 * position as u128);
    let coin = rng.next_u64();
    let pick = rng.next_u64();
    PositionDraw {
        replace: unit_interval(coin) < p,
        rank: bounded(pick, m) + 1,
    }
}

/// Generates the neighbourhood set of `x`.
pub fn perturb(x: &[TokenId], table: &TokenEmbeddingTable, cfg: &PerturbationConfig) -> Result<NeighborhoodSet> {
    cfg.validate(table)?;
    if x.is_empty() {
        return Err(Error::Parameter("cannot perturb an empty token sequence".into()));
    }
    let original: Vec<TokenId> = x.iter().take(cfg.max_tokens).copied().collect();
    if let Some((pos, tok)) = original.iter().enumerate().find(|(_, &t)| !table.contains(t)) {
        return Err(Error::Data(format!(
            "token id {tok} at position {pos} is outside the vocabulary of {}",
            table.vocab_size()
        )));
    }

    let mut variants = Vec::with_capacity(cfg.k);
    let mut replaced_positions = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let mut attempt = 0;
        loop {
            let (variant, replaced) = draw_variant(&original, table, cfg, k, attempt);
            if !replaced.is_empty() || attempt >= cfg.resample_cap {
                variants.push(variant);
                replaced_positions.push(replaced);
                break;
            }
            attempt += 1;
        }
    }
    Ok(NeighborhoodSet {
        original,
        variants,
        replaced_positions,
    })
}

fn draw_variant(
    original: &[TokenId],
    table: &TokenEmbeddingTable,
    cfg: &PerturbationConfig,
    k: usize,
    attempt: usize,
) -> (Vec<TokenId>, Vec<usize>) {
    let mut rng = variant_stream(cfg.seed, k, attempt);
    let mut variant = original.to_vec();
    let mut replaced = Vec::new();
    for (i, slot) in variant.iter_mut().enumerate() {
        let draw = draw_position(&mut rng, i, cfg.p, cfg.m);
        if draw.replace {
            // a neighbour list never contains the token itself
            *slot = table.neighbor_list(original[i])[draw.rank - 1];
            replaced.push(i);
        }
    }
    (variant, replaced)
}
