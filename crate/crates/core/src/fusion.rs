//! CLIPScore gating, synthetic-image/text fusion, cross-attention over
//! retrieved captions, and the mapping network that produces prefix tokens.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{dot, Embedding};
use crate::error::{Error, Result};

/// Minimum CLIPScore for a synthetic embedding to be kept.
pub const DEFAULT_TAU_QUALITY: f64 = 0.6;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NESW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Cosine similarity between two nonzero vectors, clamped to `[-1, 1]`.
pub fn clip_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    b.ensure_dim(a.dim())?;
    let aa = dot(a.values(), a.values());
    let bb = dot(b.values(), b.values());
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = dot(a.values(), b.values()) / (aa * bb).sqrt();
    Ok(cos.clamp(-1.0, 1.0))
}

/// Indices of the `(synthetic, text)` pairs whose CLIPScore reaches
/// `tau_quality`, in input order.
pub fn quality_gate(pairs: &[(Embedding, Embedding)], tau_quality: f64) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, (synthetic, text)) in pairs.iter().enumerate() {
        if clip_score(synthetic, text)? >= tau_quality {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// `w·synthetic + (1−w)·text` with `w` the clamped CLIPScore.
    ClipscoreForward,
    /// `(1−w)·synthetic + w·text` with `w` the clamped CLIPScore.
    ClipscoreReverse,
    /// `α·synthetic + (1−α)·text`.
    Fixed { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(flatten)]
    pub strategy: FusionStrategy,
    #[serde(default = "default_tau_quality")]
    pub tau_quality: f64,
}

fn default_tau_quality() -> f64 {
    DEFAULT_TAU_QUALITY
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::ClipscoreForward,
            tau_quality: DEFAULT_TAU_QUALITY,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_quality) {
            return Err(Error::config(format!(
                "tau_quality {} outside [0, 1]",
                self.tau_quality
            )));
        }
        if let FusionStrategy::Fixed { alpha } = self.strategy {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Which operand the weight `w` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixDirection {
    /// `w` weights the synthetic embedding.
    Forward,
    /// `w` weights the text embedding.
    Reverse,
}

/// Normalized weighted sum of the two embeddings.
///
/// Both directions reduce to the text-side weight first, so
/// `Forward` with `w` and `Reverse` with `1−w` run identical arithmetic.
pub fn fuse_weighted(synthetic: &Embedding, text: &Embedding, w: f64, direction: MixDirection) -> Result<Embedding> {
    text.ensure_dim(synthetic.dim())?;
    let text_weight = match direction {
        MixDirection::Forward => 1.0 - w,
        MixDirection::Reverse => w,
    };
    let synthetic_weight = 1.0 - text_weight;
    let mixed: Vec<f32> = synthetic
        .values()
        .iter()
        .zip(text.values())
        .map(|(&s, &t)| (synthetic_weight * f64::from(s) + text_weight * f64::from(t)) as f32)
        .collect();
    Ok(Embedding::new(mixed)?.to_unit())
}

/// Synthetic image fusion under `config.strategy`.
pub fn fuse_sif(synthetic: &Embedding, text: &Embedding, config: &FusionConfig) -> Result<Embedding> {
    match config.strategy {
        FusionStrategy::ClipscoreForward => {
            let w = clip_score(synthetic, text)?.clamp(0.0, 1.0);
            fuse_weighted(synthetic, text, w, MixDirection::Forward)
        }
        FusionStrategy::ClipscoreReverse => {
            let w = clip_score(synthetic, text)?.clamp(0.0, 1.0);
            fuse_weighted(synthetic, text, w, MixDirection::Reverse)
        }
        FusionStrategy::Fixed { alpha } => fuse_weighted(synthetic, text, alpha, MixDirection::Forward),
    }
}

/// A sequence of `L ≥ 1` equal-width feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrefixTokens", into = "PrefixTokens")]
pub struct PrefixFeatures {
    tokens: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PrefixTokens {
    tokens: Vec<Vec<f64>>,
}

impl TryFrom<PrefixTokens> for PrefixFeatures {
    type Error = Error;

    fn try_from(p: PrefixTokens) -> Result<Self> {
        PrefixFeatures::new(p.tokens)
    }
}

impl From<PrefixFeatures> for PrefixTokens {
    fn from(p: PrefixFeatures) -> Self {
        PrefixTokens { tokens: p.tokens }
    }
}

impl PrefixFeatures {
    pub fn new(tokens: Vec<Vec<f64>>) -> Result<Self> {
        let dim = tokens.first().ok_or(Error::EmptyInput)?.len();
        if dim == 0 {
            return Err(Error::EmptyInput);
        }
        for t in &tokens {
            if t.len() != dim {
                return Err(Error::dims(dim, t.len()));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("non-finite prefix value"));
            }
        }
        Ok(PrefixFeatures { tokens })
    }

    /// A one-token prefix holding `embedding`.
    pub fn single(embedding: &Embedding) -> Self {
        PrefixFeatures {
            tokens: vec![widen(embedding.values())],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i]
    }

    pub(crate) fn tokens_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tokens
    }

    /// Coordinate-wise mean of all tokens.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.tokens.len() as f64;
        (0..self.dim())
            .map(|j| self.tokens.iter().map(|t| t[j]).sum::<f64>() / n)
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tokens.concat()
    }
}

/// Parameters of the cross-attention fusion and the mapping network.
///
/// `q`, `k` and `v` are `d×d`; `map` is `(L·d)×(L·d)`; all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    dim: usize,
    prefix_len: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    map: Vec<f32>,
}

impl AttentionWeights {
    pub fn new(dim: usize, prefix_len: usize, q: Vec<f32>, k: Vec<f32>, v: Vec<f32>, map: Vec<f32>) -> Result<Self> {
        if dim == 0 || prefix_len == 0 {
            return Err(Error::config("attention dimension and prefix length must be positive"));
        }
        let square = dim * dim;
        let wide = prefix_len * dim;
        for (name, m, expected) in [
            ("q", &q, square),
            ("k", &k, square),
            ("v", &v, square),
            ("map", &map, wide * wide),
        ] {
            if m.len() != expected {
                return Err(Error::format(format!(
                    "{name} projection has {} entries, expected {expected}",
                    m.len()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(format!("{name} projection has non-finite entries")));
            }
        }
        Ok(AttentionWeights {
            dim,
            prefix_len,
            q,
            k,
            v,
            map,
        })
    }

    /// Identity projections, and a mapping network that copies the input.
    pub fn identity(dim: usize, prefix_len: usize) -> Result<Self> {
        let eye = |n: usize| {
            let mut m = vec![0.0f32; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            m
        };
        AttentionWeights::new(dim, prefix_len, eye(dim), eye(dim), eye(dim), eye(prefix_len * dim))
    }

    /// Xavier-uniform initialization from a ChaCha8 stream seeded by `seed`.
    pub fn xavier(dim: usize, prefix_len: usize, seed: u64) -> Result<Self> {
        if dim == 0 || prefix_len == 0 {
            return Err(Error::config("attention dimension and prefix length must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, fan_out: usize, n: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f32>>()
        };
        let wide = prefix_len * dim;
        let q = draw(dim, dim, dim * dim);
        let k = draw(dim, dim, dim * dim);
        let v = draw(dim, dim, dim * dim);
        let map = draw(wide, wide, wide * wide);
        AttentionWeights::new(dim, prefix_len, q, k, v, map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn q_proj(&self) -> &[f32] {
        &self.q
    }

    pub fn k_proj(&self) -> &[f32] {
        &self.k
    }

    pub fn v_proj(&self) -> &[f32] {
        &self.v
    }

    pub fn map_proj(&self) -> &[f32] {
        &self.map
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        for n in [self.dim, self.prefix_len] {
            let n = u32::try_from(n).map_err(|_| Error::format("weights shape too large"))?;
            w.write_all(&n.to_le_bytes())?;
        }
        for m in [&self.q, &self.k, &self.v, &self.map] {
            for x in m.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let eof = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::format("truncated weights file")
            } else {
                Error::Io(e)
            }
        };
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(eof)?;
        if word != WEIGHTS_MAGIC {
            return Err(Error::format(format!("bad weights magic {word:?}")));
        }
        let mut header = [0u32; 3];
        for h in &mut header {
            r.read_exact(&mut word).map_err(eof)?;
            *h = u32::from_le_bytes(word);
        }
        let [version, dim, prefix_len] = header;
        if version != WEIGHTS_VERSION {
            return Err(Error::format(format!("unsupported weights version {version}")));
        }
        let (dim, prefix_len) = (dim as usize, prefix_len as usize);
        if dim == 0 || prefix_len == 0 {
            return Err(Error::format("weights shape must be positive"));
        }
        let mut read_matrix = |n: usize| -> Result<Vec<f32>> {
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut word).map_err(eof)?;
                m.push(f32::from_le_bytes(word));
            }
            Ok(m)
        };
        let q = read_matrix(dim * dim)?;
        let k = read_matrix(dim * dim)?;
        let v = read_matrix(dim * dim)?;
        let wide = dim * prefix_len;
        let map = read_matrix(wide * wide)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after weights"));
        }
        AttentionWeights::new(dim, prefix_len, q, k, v, map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        AttentionWeights::read_from(BufReader::new(File::open(path)?))
    }
}

/// `m · x` for a row-major `rows×x.len()` matrix, accumulated in `f64`.
fn matvec(m: &[f32], x: &[f64]) -> Vec<f64> {
    m.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(&a, &b)| f64::from(a) * b).sum())
        .collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Output of [`fuse_retrieval_traced`]: fused tokens plus one softmax row
/// per query token.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: PrefixFeatures,
    pub attention: Vec<Vec<f64>>,
}

/// Single-head scaled dot-product cross-attention from the fused input
/// tokens (queries) to the retrieved caption embeddings (keys and values),
/// with a residual connection.
pub fn fuse_retrieval(
    fused_input: &PrefixFeatures,
    retrieved: &[Embedding],
    weights: &AttentionWeights,
) -> Result<PrefixFeatures> {
    fuse_retrieval_traced(fused_input, retrieved, weights).map(|t| t.output)
}

pub fn fuse_retrieval_traced(
    fused_input: &PrefixFeatures,
    retrieved: &[Embedding],
    weights: &AttentionWeights,
) -> Result<AttentionTrace> {
    let d = weights.dim;
    if fused_input.dim() != d {
        return Err(Error::dims(d, fused_input.dim()));
    }
    if retrieved.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let mut keys = Vec::with_capacity(retrieved.len());
    let mut values = Vec::with_capacity(retrieved.len());
    for r in retrieved {
        r.ensure_dim(d)?;
        let x = widen(r.values());
        keys.push(matvec(&weights.k, &x));
        values.push(matvec(&weights.v, &x));
    }
    let scale = (d as f64).sqrt();
    let mut tokens = Vec::with_capacity(fused_input.len());
    let mut attention = Vec::with_capacity(fused_input.len());
    for token in fused_input.tokens() {
        let x = token.clone();
        let q = matvec(&weights.q, &x);
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let probs = softmax(&logits);
        let mut out = x;
        for (p, v) in probs.iter().zip(&values) {
            for (o, vj) in out.iter_mut().zip(v) {
                *o += p * vj;
            }
        }
        tokens.push(out);
        attention.push(probs);
    }
    Ok(AttentionTrace {
        output: PrefixFeatures::new(tokens)?,
        attention,
    })
}

/// Linear mapping network: `map · flatten(input)` reshaped into `L` tokens.
/// A single-token input is first repeated `L` times.
pub fn map_to_prefix(attn_out: &PrefixFeatures, weights: &AttentionWeights) -> Result<PrefixFeatures> {
    let d = weights.dim;
    if attn_out.dim() != d {
        return Err(Error::dims(d, attn_out.dim()));
    }
    let l = weights.prefix_len;
    let flat: Vec<f64> = match attn_out.len() {
        n if n == l => attn_out.flatten(),
        1 => attn_out.token(0).repeat(l),
        n => return Err(Error::dims(l, n)),
    };
    let mapped = matvec(&weights.map, &flat);
    PrefixFeatures::new(mapped.chunks_exact(d).map(<[f64]>::to_vec).collect())
}
