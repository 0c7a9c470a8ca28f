//! Immutable caption datastore with exact top-k cosine retrieval.
//!
//! Records are kept sorted by id, every embedding is unit length, and a
//! query is a full scan followed by partial selection of the k best
//! `(score desc, id asc)` entries.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{load_embedding_file, sniff_format, write_binary, Embedding, EmbeddingSource, FileEmbeddings};
use crate::error::{Error, Result};

/// Number of captions retrieved per query unless configured otherwise.
pub const DEFAULT_K: usize = 9;

pub const EMBEDDINGS_FILE: &str = "embeddings.nese";
pub const CAPTIONS_FILE: &str = "captions.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    pub embedding: Embedding,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, caption: impl Into<String>, embedding: Embedding) -> Self {
        CaptionRecord {
            id: id.into(),
            caption: caption.into(),
            embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.caption.as_str())
    }
}

/// Ranking order: higher score first, then ascending id.
fn rank(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    records: Vec<CaptionRecord>,
}

impl Datastore {
    /// Validates and freezes a set of records. Embeddings are renormalized.
    pub fn build(records: impl IntoIterator<Item = CaptionRecord>) -> Result<Self> {
        let mut records: Vec<CaptionRecord> = records.into_iter().collect();
        let dim = records.first().ok_or(Error::EmptyDatastore)?.embedding.dim();
        let mut seen = HashSet::with_capacity(records.len());
        for r in &mut records {
            r.embedding.ensure_dim(dim)?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if !r.embedding.is_normalized() {
                r.embedding = r.embedding.to_unit();
            }
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Datastore { dim, records })
    }

    /// Pairs each caption with the embedding stored under the same id.
    pub fn from_parts(captions: &[(String, String)], embeddings: &FileEmbeddings) -> Result<Self> {
        let records = captions
            .iter()
            .map(|(id, caption)| {
                let emb = embeddings.get(id).ok_or_else(|| Error::UnknownKey(id.clone()))?;
                Ok(CaptionRecord::new(id.clone(), caption.clone(), emb.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Datastore::build(records)
    }

    /// Embeds every caption with `source`, using `(id, caption)` pairs.
    pub fn embed_captions<S: EmbeddingSource + ?Sized>(captions: &[(String, String)], source: &S) -> Result<Self> {
        let records = captions
            .iter()
            .map(|(id, caption)| {
                Ok(CaptionRecord::new(
                    id.clone(),
                    caption.clone(),
                    source.embed_text(caption)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Datastore::build(records)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending id order.
    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&CaptionRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Exact top-`k` by cosine similarity.
    pub fn retrieve(&self, query: &Embedding, k: usize) -> Result<RetrievalResult> {
        query.ensure_dim(self.dim)?;
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (crate::embedder::dot(query.values(), r.embedding.values()), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| rank((a.0, &self.records[a.1].id), (b.0, &self.records[b.1].id));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(RetrievalResult {
            hits: scored
                .into_iter()
                .map(|(score, i)| Hit {
                    id: self.records[i].id.clone(),
                    caption: self.records[i].caption.clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Writes `embeddings.nese` and `captions.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut emb = BufWriter::new(File::create(dir.join(EMBEDDINGS_FILE))?);
        write_binary(
            &mut emb,
            self.dim,
            self.records.iter().map(|r| (r.id.as_str(), r.embedding.values())),
        )?;
        emb.flush()?;
        let mut caps = BufWriter::new(File::create(dir.join(CAPTIONS_FILE))?);
        write_captions(
            &mut caps,
            self.records.iter().map(|r| (r.id.as_str(), r.caption.as_str())),
        )?;
        caps.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let emb_path = dir.join(EMBEDDINGS_FILE);
        let embeddings = load_embedding_file(&emb_path, sniff_format(&emb_path)?)?;
        let captions = read_captions(BufReader::new(File::open(dir.join(CAPTIONS_FILE))?))?;
        Datastore::from_parts(&captions, &embeddings)
    }
}

/// Exhaustive reference scan: scores every record and fully sorts.
pub fn brute_force_topk(records: &[CaptionRecord], query: &Embedding, k: usize) -> Result<RetrievalResult> {
    let mut hits = Vec::with_capacity(records.len());
    for r in records {
        hits.push(Hit {
            id: r.id.clone(),
            caption: r.caption.clone(),
            score: query.dot(&r.embedding)?,
        });
    }
    hits.sort_by(|a, b| rank((a.score, &a.id), (b.score, &b.id)));
    hits.truncate(k);
    Ok(RetrievalResult { hits })
}

/// Parses `id<TAB>caption` lines. Blank lines are skipped.
pub fn read_captions<R: BufRead>(r: R) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("line {}: missing TAB separator", lineno + 1)))?;
        out.push((id.to_string(), caption.to_string()));
    }
    Ok(out)
}

pub fn write_captions<'a, W: Write>(w: &mut W, rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    for (id, caption) in rows {
        if id.contains(['\t', '\n', '\r']) || caption.contains(['\n', '\r']) {
            return Err(Error::format(format!(
                "record {id:?} cannot be written as a single TSV line"
            )));
        }
        writeln!(w, "{id}\t{caption}")?;
    }
    Ok(())
}
