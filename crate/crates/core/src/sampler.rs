//! Turning weights into keep/drop decisions.
//!
//! Every example gets a uniform draw from a counter-based generator keyed by
//! `(seed, hash(id))`, so a decision does not depend on where the example sits
//! in the stream.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{BalanceError, Result};
use crate::types::WeightedExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Keep each example independently with probability `q / Q`.
    #[default]
    Bernoulli,
    /// Keep the `ceil(rate * n)` largest weights.
    TopQ,
}

impl std::str::FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "topq" | "top-q" | "top_q" => Ok(Self::TopQ),
            other => Err(format!("unknown sampling mode '{other}' (expected bernoulli or topq)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDecision {
    pub id: String,
    pub q: f64,
    pub kept: bool,
    /// Uniform variate in `[0, 1)` used for the decision.
    pub draw: f64,
}

/// 64-bit FNV-1a.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` for example `id` under `seed`.
pub fn keyed_uniform(seed: u64, id: &str) -> f64 {
    let bits = splitmix64(splitmix64(seed) ^ id_hash(id));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn bernoulli(we: &WeightedExample, q_max: f64, seed: u64) -> SampleDecision {
    let draw = keyed_uniform(seed, &we.example.id);
    SampleDecision {
        id: we.example.id.clone(),
        q: we.q,
        kept: draw < we.q / q_max,
        draw,
    }
}

/// Decisions for a finite batch of weighted examples.
pub fn subsample(
    items: &[WeightedExample],
    mode: SampleMode,
    q_max: f64,
    seed: u64,
    rate_hint: f64,
) -> Vec<SampleDecision> {
    match mode {
        SampleMode::Bernoulli => items.iter().map(|we| bernoulli(we, q_max, seed)).collect(),
        SampleMode::TopQ => {
            let budget = ((rate_hint.clamp(0.0, 1.0) * items.len() as f64).ceil() as usize).min(items.len());
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.sort_by(|&i, &j| {
                items[j]
                    .q
                    .partial_cmp(&items[i].q)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| items[i].example.id.cmp(&items[j].example.id))
            });
            let mut kept = vec![false; items.len()];
            for &i in &order[..budget] {
                kept[i] = true;
            }
            items
                .iter()
                .zip(kept)
                .map(|(we, kept)| SampleDecision {
                    id: we.example.id.clone(),
                    q: we.q,
                    kept,
                    draw: keyed_uniform(seed, &we.example.id),
                })
                .collect()
        }
    }
}

/// Lazily decides an unbounded stream. Only Bernoulli sampling can run
/// without seeing the whole stream.
pub fn subsample_stream<I>(
    stream: I,
    mode: SampleMode,
    q_max: f64,
    seed: u64,
) -> Result<impl Iterator<Item = SampleDecision>>
where
    I: IntoIterator<Item = WeightedExample>,
{
    if mode == SampleMode::TopQ {
        return Err(BalanceError::InfiniteStreamTopQ);
    }
    Ok(stream.into_iter().map(move |we| bernoulli(&we, q_max, seed)))
}
