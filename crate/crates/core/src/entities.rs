//! Entity vocabulary, caption entity extraction, zero-shot image entity
//! ranking, and negative entity filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{Embedding, EmbeddingSource};
use crate::error::{Error, Result};
use crate::text::{tokenize, tokenize_with_spans};

/// Cosine threshold above which a retrieved entity counts as present in the
/// image.
pub const DEFAULT_TAU_SIM: f64 = 0.2;

pub type EntitySet = BTreeSet<String>;

fn normalize_term(term: &str) -> Option<String> {
    let tokens = tokenize(term);
    (!tokens.is_empty()).then(|| tokens.join(" "))
}

/// Canonical entity terms plus a surface-form table mapping synonyms (and
/// each canonical term itself) to their canonical term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityVocabulary {
    canonical: BTreeSet<String>,
    synonyms: BTreeMap<String, String>,
    surfaces: HashMap<Vec<String>, String>,
    longest: usize,
}

/// One occurrence of an entity in a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub canonical: String,
    /// Byte range in the caption, from the first to the last matched token.
    pub span: Range<usize>,
}

impl EntityVocabulary {
    pub fn new<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = EntityVocabulary::default();
        for term in terms {
            vocab.add_canonical(term.as_ref())?;
        }
        Ok(vocab)
    }

    fn add_surface(&mut self, surface: String, canonical: String) -> Result<()> {
        match self.synonyms.get(&surface) {
            Some(existing) if *existing != canonical => {
                return Err(Error::format(format!(
                    "surface form {surface:?} maps to both {existing:?} and {canonical:?}"
                )))
            }
            Some(_) => return Ok(()),
            None => {}
        }
        let tokens: Vec<String> = surface.split(' ').map(str::to_string).collect();
        self.longest = self.longest.max(tokens.len());
        self.surfaces.insert(tokens, canonical.clone());
        self.synonyms.insert(surface, canonical);
        Ok(())
    }

    pub fn add_canonical(&mut self, term: &str) -> Result<()> {
        let term = normalize_term(term).ok_or_else(|| Error::format(format!("empty entity term {term:?}")))?;
        self.canonical.insert(term.clone());
        self.add_surface(term.clone(), term)
    }

    /// Registers `surface` as another way of writing `canonical`, which must
    /// already be in the vocabulary.
    pub fn add_synonym(&mut self, canonical: &str, surface: &str) -> Result<()> {
        let canonical = normalize_term(canonical)
            .filter(|c| self.canonical.contains(c))
            .ok_or_else(|| Error::format(format!("{canonical:?} is not a canonical term")))?;
        let surface =
            normalize_term(surface).ok_or_else(|| Error::format(format!("empty synonym for {canonical:?}")))?;
        self.add_surface(surface, canonical)
    }

    /// Parses a vocabulary file (one term per line) and an optional synonym
    /// file (`canonical<TAB>syn1,syn2,…`). Blank lines and `#` comments are
    /// skipped in both.
    pub fn parse(vocab: &str, synonyms: Option<&str>) -> Result<Self> {
        let mut out = EntityVocabulary::new(content_lines(vocab))?;
        if let Some(text) = synonyms {
            for line in content_lines(text) {
                let (canonical, list) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::format(format!("synonym line without TAB: {line:?}")))?;
                for surface in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    out.add_synonym(canonical, surface)?;
                }
            }
        }
        Ok(out)
    }

    pub fn load(vocab: impl AsRef<Path>, synonyms: Option<&Path>) -> Result<Self> {
        let vocab = fs::read_to_string(vocab)?;
        let synonyms = synonyms.map(fs::read_to_string).transpose()?;
        EntityVocabulary::parse(&vocab, synonyms.as_deref())
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    /// Canonical terms in ascending order.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.canonical.iter().map(String::as_str)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.canonical.contains(term)
    }

    /// Maps any known surface form to its canonical term.
    pub fn canonicalize(&self, term: &str) -> Option<&str> {
        let key = normalize_term(term)?;
        self.synonyms.get(&key).map(String::as_str)
    }

    /// Canonicalizes a set of terms, dropping anything outside the vocabulary.
    pub fn canonicalize_all<'a>(&self, terms: impl IntoIterator<Item = &'a str>) -> EntitySet {
        terms
            .into_iter()
            .filter_map(|t| self.canonicalize(t))
            .map(str::to_string)
            .collect()
    }

    /// Whole-token entity occurrences, longest surface form first.
    pub fn mentions(&self, caption: &str) -> Vec<Mention> {
        let tokens = tokenize_with_spans(caption);
        let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let mut found = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let max = self.longest.min(words.len() - i);
            let hit = (1..=max).rev().find_map(|len| {
                let run: Vec<String> = words[i..i + len].iter().map(|w| w.to_string()).collect();
                self.surfaces.get(&run).map(|c| (len, c))
            });
            match hit {
                Some((len, canonical)) => {
                    found.push(Mention {
                        canonical: canonical.clone(),
                        span: tokens[i].span.start..tokens[i + len - 1].span.end,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }

    /// The set of canonical entities mentioned in `caption`.
    pub fn extract(&self, caption: &str) -> EntitySet {
        self.mentions(caption).into_iter().map(|m| m.canonical).collect()
    }

    /// Union of the entities of several captions.
    pub fn extract_all<'a>(&self, captions: impl IntoIterator<Item = &'a str>) -> EntitySet {
        captions.into_iter().flat_map(|c| self.extract(c)).collect()
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// Ranks vocabulary terms by cosine between the image embedding and the
/// embedding of `"A photo of {term}"`, returning the best `top_m` (ties by
/// ascending term).
pub fn classify_image_entities<S: EmbeddingSource + ?Sized>(
    image: &Embedding,
    vocab: &EntityVocabulary,
    source: &S,
    top_m: usize,
) -> Result<Vec<String>> {
    Ok(rank_image_entities(image, vocab, source)?
        .into_iter()
        .take(top_m)
        .map(|(term, _)| term)
        .collect())
}

/// Every vocabulary term with its similarity to the image, best first.
pub fn rank_image_entities<S: EmbeddingSource + ?Sized>(
    image: &Embedding,
    vocab: &EntityVocabulary,
    source: &S,
) -> Result<Vec<(String, f64)>> {
    image.ensure_dim(source.dim())?;
    let mut scored = vocab
        .terms()
        .map(|t| Ok((t.to_string(), source.embed_entity(t)?.dot(image)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

/// Key, candidate, filtered, positive and negative entity sets for one
/// input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySets {
    pub key: EntitySet,
    pub candidates: EntitySet,
    pub filtered: EntitySet,
    pub positive: EntitySet,
    pub negative: EntitySet,
}

impl EntitySets {
    pub fn check(&self) -> Result<()> {
        let filtered: EntitySet = self.candidates.difference(&self.key).cloned().collect();
        if filtered != self.filtered {
            return Err(Error::Invariant("filtered != candidates \\ key".into()));
        }
        if !self.positive.is_superset(&self.key) {
            return Err(Error::Invariant("positive does not contain key".into()));
        }
        if !self.positive.is_disjoint(&self.negative) {
            return Err(Error::Invariant("positive and negative overlap".into()));
        }
        let covered = self
            .candidates
            .union(&self.key)
            .all(|e| self.positive.contains(e) || self.negative.contains(e));
        if !covered {
            return Err(Error::Invariant("positive ∪ negative misses an entity".into()));
        }
        if !self.negative.is_subset(&self.filtered) {
            return Err(Error::Invariant("negative not within filtered".into()));
        }
        Ok(())
    }
}

fn split_candidates(key: &EntitySet, candidates: &EntitySet) -> EntitySets {
    EntitySets {
        key: key.clone(),
        candidates: candidates.clone(),
        filtered: candidates.difference(key).cloned().collect(),
        positive: key.clone(),
        negative: EntitySet::new(),
    }
}

/// Training mode: ground-truth entities are positive, every other candidate
/// is negative.
pub fn filter_training(key: &EntitySet, candidates: &EntitySet) -> EntitySets {
    let mut sets = split_candidates(key, candidates);
    sets.negative = sets.filtered.clone();
    sets
}

/// Inference mode: a filtered candidate joins the positives when its
/// templated embedding has cosine strictly above `tau_sim` with the image.
pub fn filter_inference<S: EmbeddingSource + ?Sized>(
    key: &EntitySet,
    candidates: &EntitySet,
    image: &Embedding,
    source: &S,
    tau_sim: f64,
) -> Result<EntitySets> {
    if !(-1.0..=1.0).contains(&tau_sim) {
        return Err(Error::config(format!("tau_sim {tau_sim} outside [-1, 1]")));
    }
    image.ensure_dim(source.dim())?;
    let mut sets = split_candidates(key, candidates);
    for e in &sets.filtered {
        if source.embed_entity(e)?.dot(image)? > tau_sim {
            sets.positive.insert(e.clone());
        } else {
            sets.negative.insert(e.clone());
        }
    }
    Ok(sets)
}

/// Filtering disabled: every retrieved entity passes as positive.
pub fn filter_passthrough(key: &EntitySet, candidates: &EntitySet) -> EntitySets {
    let mut sets = split_candidates(key, candidates);
    sets.positive.extend(sets.filtered.iter().cloned());
    sets
}
