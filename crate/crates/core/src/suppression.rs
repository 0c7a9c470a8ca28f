//! Attention-level hallucination suppression.
//!
//! Negative entity embeddings attend over the prefix tokens; tokens that
//! attract too much of that attention are scaled down by `lambda`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::fusion::{softmax, PrefixFeatures};

/// Scale applied to selected prefix tokens.
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// Share of tokens picked by the proportional strategy when no proportion is
/// given explicitly.
pub const DEFAULT_PROPORTION: f64 = 0.01;

/// How suppressed tokens are chosen from their negative-attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Selection {
    /// Every token scoring strictly above `tau_neg`.
    FixedThreshold { tau_neg: f64 },
    /// The `k` best tokens, `k` being the number of negative entities.
    TopK,
    /// The `k − 1` best tokens.
    TopKMinusOne,
    /// The best `⌈proportion · L⌉` tokens.
    Proportional { proportion: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    #[serde(flatten)]
    pub selection: Selection,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl SuppressionConfig {
    pub fn new(selection: Selection) -> Self {
        SuppressionConfig {
            selection,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        match self.selection {
            Selection::FixedThreshold { tau_neg } if !tau_neg.is_finite() => {
                Err(Error::config("tau_neg must be finite"))
            }
            Selection::Proportional { proportion } if !(proportion > 0.0 && proportion <= 1.0) => {
                Err(Error::config(format!("proportion {proportion} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-token scores, the chosen tokens and the factor applied to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub scores: Vec<f64>,
    pub selected: BTreeSet<usize>,
    #[serde(rename = "lambda")]
    pub lambda_applied: f64,
}

impl SuppressionReport {
    /// Report for a prefix that was left untouched.
    pub fn inactive(len: usize) -> Self {
        SuppressionReport {
            scores: vec![0.0; len],
            selected: BTreeSet::new(),
            lambda_applied: 1.0,
        }
    }

    pub fn check(&self, prefix_len: usize) -> Result<()> {
        if self.scores.len() != prefix_len {
            return Err(Error::Invariant(format!(
                "{} scores for a prefix of {prefix_len} tokens",
                self.scores.len()
            )));
        }
        if let Some(&i) = self.selected.iter().find(|&&i| i >= prefix_len) {
            return Err(Error::Invariant(format!("selected token {i} out of range")));
        }
        Ok(())
    }
}

/// Softmax rows (one per negative entity) and the per-token max over them.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeAttention {
    pub rows: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

pub fn negative_attention(prefix: &PrefixFeatures, negatives: &[Embedding]) -> Result<NegativeAttention> {
    let d = prefix.dim();
    let scale = (d as f64).sqrt();
    let mut rows = Vec::with_capacity(negatives.len());
    let mut scores = vec![0.0; prefix.len()];
    for q in negatives {
        q.ensure_dim(d)?;
        let logits: Vec<f64> = prefix
            .tokens()
            .iter()
            .map(|t| q.values().iter().zip(t).map(|(&a, &b)| f64::from(a) * b).sum::<f64>() / scale)
            .collect();
        let row = softmax(&logits);
        for (s, &w) in scores.iter_mut().zip(&row) {
            *s = f64::max(*s, w);
        }
        rows.push(row);
    }
    Ok(NegativeAttention { rows, scores })
}

/// Per-token attention from the negative entities, aggregated by max. With
/// no negative entities every score is zero.
pub fn score_negative_attention(prefix: &PrefixFeatures, negatives: &[Embedding]) -> Result<Vec<f64>> {
    negative_attention(prefix, negatives).map(|a| a.scores)
}

fn top_n(scores: &[f64], n: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().take(n).collect()
}

pub fn select_tokens(scores: &[f64], neg_count: usize, selection: &Selection) -> BTreeSet<usize> {
    match *selection {
        Selection::FixedThreshold { tau_neg } => scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > tau_neg)
            .map(|(i, _)| i)
            .collect(),
        Selection::TopK => top_n(scores, neg_count),
        Selection::TopKMinusOne => top_n(scores, neg_count.saturating_sub(1)),
        Selection::Proportional { proportion } => {
            let n = (proportion * scores.len() as f64).ceil() as usize;
            top_n(scores, n)
        }
    }
}

/// Scales the selected tokens by `lambda`; all others are copied unchanged.
pub fn suppress(prefix: &PrefixFeatures, selected: &BTreeSet<usize>, lambda: f64) -> Result<PrefixFeatures> {
    if let Some(&index) = selected.iter().find(|&&i| i >= prefix.len()) {
        return Err(Error::IndexOutOfRange {
            index,
            len: prefix.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = prefix.clone();
    for &i in selected {
        for v in &mut out.tokens_mut()[i] {
            *v *= lambda;
        }
    }
    Ok(out)
}

/// Scores, selects and suppresses in one step.
pub fn apply_suppression(
    prefix: &PrefixFeatures,
    negatives: &[Embedding],
    config: &SuppressionConfig,
) -> Result<(PrefixFeatures, SuppressionReport)> {
    let scores = score_negative_attention(prefix, negatives)?;
    let selected = if negatives.is_empty() {
        BTreeSet::new()
    } else {
        select_tokens(&scores, negatives.len(), &config.selection)
    };
    let suppressed = suppress(prefix, &selected, config.lambda)?;
    Ok((
        suppressed,
        SuppressionReport {
            scores,
            selected,
            lambda_applied: config.lambda,
        },
    ))
}
