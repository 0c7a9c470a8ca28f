//! Embeddings and the sources that produce them.
//!
//! Two interchangeable [`EmbeddingSource`]s are provided: [`FileEmbeddings`],
//! a key/vector table loaded from disk, and [`HashEmbedder`], a seeded
//! feature-hashing embedder that needs no external data. Every embedding a
//! source hands out is L2-normalized, so cosine similarity is a plain dot
//! product everywhere downstream.

pub mod format;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub use format::{
    load_embedding_file, read_binary, read_lines, sniff_format, write_binary, write_embedding_file, write_lines,
    EmbeddingFormat, BINARY_MAGIC, BINARY_VERSION,
};

/// Tolerance on the Euclidean norm of a normalized embedding.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Template used to turn an entity term into a describable text.
pub const ENTITY_TEMPLATE: &str = "A photo of ";

/// Builds the text embedded for an entity, e.g. `"A photo of dog"`.
pub fn entity_prompt(entity: &str) -> String {
    format!("{ENTITY_TEMPLATE}{entity}")
}

/// A fixed-dimension vector of finite values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps raw values without rescaling them.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(format!(
                "non-finite value {} at coordinate {i}",
                values[i]
            )));
        }
        Ok(Embedding(values))
    }

    /// Validates and L2-normalizes `values`. The all-zero vector maps to the
    /// first unit basis vector.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        Ok(Embedding::new(values)?.to_unit())
    }

    /// The unit vector along `axis`.
    pub fn unit_basis(dim: usize, axis: usize) -> Self {
        assert!(axis < dim, "axis {axis} out of range for dim {dim}");
        let mut values = vec![0.0; dim];
        values[axis] = 1.0;
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    /// Rescales to unit length; the zero vector becomes `e₁`.
    pub fn to_unit(&self) -> Embedding {
        let norm = self.norm();
        if norm == 0.0 {
            return Embedding::unit_basis(self.dim(), 0);
        }
        Embedding(self.0.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::dims(expected, self.dim()))
        }
    }

    /// Dot product accumulated in `f64`.
    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        other.ensure_dim(self.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Embedding").field(&self.0).finish()
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Anything that can embed text into a shared vector space.
///
/// Implementations are immutable once built and return normalized vectors of
/// exactly [`dim`](EmbeddingSource::dim) coordinates.
pub trait EmbeddingSource: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Embedding>;

    /// Embeds the templated description of an entity rather than the bare
    /// term.
    fn embed_entity(&self, entity: &str) -> Result<Embedding> {
        let entity = entity.trim();
        if entity.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.embed_text(&entity_prompt(entity))
    }
}

impl<S: EmbeddingSource + ?Sized> EmbeddingSource for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        (**self).embed_text(text)
    }

    fn embed_entity(&self, entity: &str) -> Result<Embedding> {
        (**self).embed_entity(entity)
    }
}

impl<S: EmbeddingSource + ?Sized> EmbeddingSource for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        (**self).embed_text(text)
    }

    fn embed_entity(&self, entity: &str) -> Result<Embedding> {
        (**self).embed_entity(entity)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit token hash: FNV-1a keyed by the seed, then a splitmix
/// finalizer so that both the low bits (bucket) and the top bit (sign) mix.
fn token_hash(seed: u64, token: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for &b in token {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Feature-hashing text embedder with the sign trick.
///
/// Every token is hashed to a bucket in `0..dim` and a sign; signed counts are
/// accumulated as integers and only then projected to floats and normalized,
/// so the output is bit-identical on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(HashEmbedder { dim, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Signed bucket counts before the float projection.
    pub fn counts(&self, text: &str) -> Vec<i64> {
        let mut counts = vec![0i64; self.dim];
        for token in tokenize(text) {
            let h = token_hash(self.seed, token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            counts[bucket] += if h >> 63 == 1 { -1 } else { 1 };
        }
        counts
    }
}

impl EmbeddingSource for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let counts = self.counts(text);
        let norm = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Embedding::unit_basis(self.dim, 0));
        }
        Ok(Embedding(counts.iter().map(|&c| (c as f64 / norm) as f32).collect()))
    }
}

/// Precomputed vectors keyed by text, renormalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FileEmbeddings {
    dim: usize,
    entries: BTreeMap<String, Embedding>,
}

impl FileEmbeddings {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(FileEmbeddings {
            dim,
            entries: BTreeMap::new(),
        })
    }

    /// Builds a table from raw vectors, normalizing each one. Zero vectors
    /// and duplicate keys are rejected.
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut table = FileEmbeddings::new(dim)?;
        for (key, values) in entries {
            table.insert(key, values)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, key: String, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::format(format!(
                "vector for {key:?} has {} values, expected {}",
                values.len(),
                self.dim
            )));
        }
        let raw = Embedding::new(values)?;
        if raw.norm() == 0.0 {
            return Err(Error::format(format!("zero vector for key {key:?}")));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::format(format!("duplicate key {key:?}")));
        }
        let unit = if raw.is_normalized() { raw } else { raw.to_unit() };
        self.entries.insert(key, unit);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        load_embedding_file(path, sniff_format(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&Embedding> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl EmbeddingSource for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        self.entries
            .get(text)
            .cloned()
            .ok_or_else(|| Error::UnknownKey(text.to_string()))
    }
}

/// Serializable description of an embedding source, used by config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceSpec {
    Hash { dim: usize, seed: u64 },
    File { path: std::path::PathBuf },
}

impl SourceSpec {
    pub fn build(&self) -> Result<Box<dyn EmbeddingSource>> {
        Ok(match self {
            SourceSpec::Hash { dim, seed } => Box::new(HashEmbedder::new(*dim, *seed)?),
            SourceSpec::File { path } => Box::new(FileEmbeddings::load(path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_deterministic() {
        let src = HashEmbedder::new(8, 7).unwrap();
        let a = src.embed_text("a dog").unwrap();
        let b = src.embed_text("a dog").unwrap();
        assert_eq!(a.dim(), 8);
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.is_normalized());
    }

    #[test]
    fn hash_embedding_distinguishes_texts() {
        let src = HashEmbedder::new(8, 7).unwrap();
        let dog = src.embed_text("a dog").unwrap();
        let cat = src.embed_text("a cat").unwrap();
        // Independent check on the integer counts: the two token bags differ
        // in exactly one token, so the count vectors must differ unless
        // "dog" and "cat" hash to the same signed bucket.
        assert_ne!(src.counts("a dog"), src.counts("a cat"));
        assert_ne!(dog, cat);
    }

    #[test]
    fn hash_embedding_ignores_case_and_punctuation() {
        let src = HashEmbedder::new(32, 1).unwrap();
        assert_eq!(src.embed_text("A Dog!").unwrap(), src.embed_text("a dog").unwrap());
    }

    #[test]
    fn cancelling_tokens_fall_back_to_first_axis() {
        let src = HashEmbedder::new(4, 3).unwrap();
        // Search for two tokens that land in the same bucket with opposite
        // signs; their sum is the zero vector.
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let signed: Vec<Vec<i64>> = words.iter().map(|w| src.counts(w)).collect();
        let pair = (0..words.len())
            .flat_map(|i| (i + 1..words.len()).map(move |j| (i, j)))
            .find(|&(i, j)| signed[i].iter().zip(&signed[j]).all(|(a, b)| a + b == 0))
            .expect("some pair cancels in 4 buckets");
        let text = format!("{} {}", words[pair.0], words[pair.1]);
        assert_eq!(src.embed_text(&text).unwrap(), Embedding::unit_basis(4, 0));
    }

    #[test]
    fn empty_text_is_rejected() {
        let src = HashEmbedder::new(8, 0).unwrap();
        assert!(matches!(src.embed_text("   "), Err(Error::EmptyInput)));
        assert!(matches!(src.embed_entity(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn entity_embedding_uses_template() {
        let src = HashEmbedder::new(16, 5).unwrap();
        assert_eq!(
            src.embed_entity("dog").unwrap(),
            src.embed_text("A photo of dog").unwrap()
        );
        assert_eq!(
            src.embed_entity("frisbee").unwrap(),
            src.embed_text("A photo of frisbee").unwrap()
        );
    }

    #[test]
    fn file_source_returns_renormalized_vector() {
        let table = FileEmbeddings::from_entries(3, [("cap_001".to_string(), vec![3.0, 0.0, 4.0])]).unwrap();
        let e = table.embed_text("cap_001").unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-7);
        assert!((e.values()[2] - 0.8).abs() < 1e-7);
        assert!(e.is_normalized());
    }

    #[test]
    fn file_source_unknown_key() {
        let table = FileEmbeddings::from_entries(2, [("A photo of dog".to_string(), vec![1.0, 0.0])]).unwrap();
        assert!(table.embed_entity("dog").is_ok());
        match table.embed_entity("zebra") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "A photo of zebra"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_and_zero() {
        assert!(Embedding::new(vec![1.0, f32::NAN]).is_err());
        assert!(Embedding::new(vec![]).is_err());
        assert!(FileEmbeddings::from_entries(2, [("z".to_string(), vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn embedding_deserialize_validates() {
        let ok: Embedding = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(ok.dim(), 2);
        assert!(serde_json::from_str::<Embedding>("[]").is_err());
    }
}
