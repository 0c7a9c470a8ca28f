//! Training- and inference-phase orchestration, plus an extractive stand-in
//! decoder that turns a [`GenerationContext`] into a caption so the loop can
//! be scored.
//!
//! Training: synthetic embedding (optionally fused with the caption's text
//! embedding) is the retrieval query and ground-truth entities drive
//! filtering. Inference: the image embedding is the query, key entities come
//! from zero-shot ranking, and candidates are filtered by similarity.

use serde::{Deserialize, Serialize};

use crate::datastore::{Datastore, RetrievalResult, DEFAULT_K};
use crate::embedder::{Embedding, EmbeddingSource};
use crate::entities::{
    classify_image_entities, filter_inference, filter_passthrough, filter_training, EntitySet, EntitySets,
    EntityVocabulary, DEFAULT_TAU_SIM,
};
use crate::error::{Error, Result};
use crate::fusion::{
    clip_score, fuse_retrieval, fuse_sif, map_to_prefix, AttentionWeights, FusionConfig, PrefixFeatures,
};
use crate::suppression::{apply_suppression, Selection, SuppressionConfig, SuppressionReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Training,
    Inference,
}

/// What the training-phase query is when synthetic retrieval is on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingQuery {
    /// The fused embedding when fusion is enabled, else the raw synthetic one.
    #[default]
    Auto,
    /// Always the raw synthetic embedding.
    Synthetic,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_tau_sim() -> f64 {
    DEFAULT_TAU_SIM
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub fusion: FusionConfig,
    pub suppression: SuppressionConfig,
    #[serde(default = "default_tau_sim")]
    pub tau_sim: f64,
    pub top_m: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "enabled")]
    pub enable_sir: bool,
    #[serde(default = "enabled")]
    pub enable_sif: bool,
    #[serde(default = "enabled")]
    pub enable_nef: bool,
    #[serde(default = "enabled")]
    pub enable_as: bool,
    #[serde(default)]
    pub training_query: TrainingQuery,
}

impl PipelineConfig {
    /// Defaults everywhere except the two settings that have none: the
    /// number of key entities ranked per image and the token selection rule.
    pub fn new(top_m: usize, selection: Selection) -> Self {
        PipelineConfig {
            retrieval_k: DEFAULT_K,
            fusion: FusionConfig::default(),
            suppression: SuppressionConfig::new(selection),
            tau_sim: DEFAULT_TAU_SIM,
            top_m,
            mode: Mode::Training,
            enable_sir: true,
            enable_sif: true,
            enable_nef: true,
            enable_as: true,
            training_query: TrainingQuery::Auto,
        }
    }

    /// Sets all four stage toggles at once.
    pub fn with_stages(mut self, sir: bool, sif: bool, nef: bool, suppression: bool) -> Self {
        self.enable_sir = sir;
        self.enable_sif = sif;
        self.enable_nef = nef;
        self.enable_as = suppression;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval_k == 0 {
            return Err(Error::config("retrieval_k must be at least 1"));
        }
        if self.top_m == 0 {
            return Err(Error::config("top_m must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.tau_sim) {
            return Err(Error::config(format!("tau_sim {} outside [-1, 1]", self.tau_sim)));
        }
        self.fusion.validate()?;
        self.suppression.validate()
    }
}

/// Pipeline steps, recorded in the order they ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SyntheticFusion,
    Retrieval,
    ImageEntityClassification,
    EntityFiltering,
    RetrievalFusion,
    Mapping,
    Suppression,
}

/// Everything handed to a language decoder for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub suppressed_prefix: PrefixFeatures,
    pub positive_prompt: String,
    pub entity_sets: EntitySets,
    pub retrieval: RetrievalResult,
    pub suppression_report: SuppressionReport,
    pub stages: Vec<Stage>,
}

impl GenerationContext {
    pub fn check(&self) -> Result<()> {
        self.entity_sets.check()?;
        self.suppression_report.check(self.suppressed_prefix.len())?;
        if self.positive_prompt != build_prompt(&self.entity_sets.positive) {
            return Err(Error::Invariant("prompt does not list the positive entities".into()));
        }
        Ok(())
    }

    pub fn ran(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

/// Hard prompt listing the positive entities in ascending order.
pub fn build_prompt(positive: &EntitySet) -> String {
    if positive.is_empty() {
        return "There is something in the image.".to_string();
    }
    let terms: Vec<&str> = positive.iter().map(String::as_str).collect();
    format!("There are {} in the image.", terms.join(", "))
}

/// The two embedding spaces the pipeline touches: `retrieval` encodes text
/// queries against the datastore, `feature` encodes captions and entities
/// for fusion, filtering and suppression.
#[derive(Clone, Copy)]
pub struct Sources<'a> {
    pub retrieval: &'a dyn EmbeddingSource,
    pub feature: &'a dyn EmbeddingSource,
}

impl<'a> Sources<'a> {
    pub fn shared(source: &'a dyn EmbeddingSource) -> Self {
        Sources {
            retrieval: source,
            feature: source,
        }
    }
}

/// Immutable pipeline state shared by every instance.
pub struct Pipeline<'a> {
    store: &'a Datastore,
    vocab: &'a EntityVocabulary,
    sources: Sources<'a>,
    weights: &'a AttentionWeights,
    config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        store: &'a Datastore,
        vocab: &'a EntityVocabulary,
        sources: Sources<'a>,
        weights: &'a AttentionWeights,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = store.dim();
        for actual in [sources.retrieval.dim(), sources.feature.dim(), weights.dim()] {
            if actual != d {
                return Err(Error::dims(d, actual));
            }
        }
        Ok(Pipeline {
            store,
            vocab,
            sources,
            weights,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Datastore {
        self.store
    }

    pub fn vocab(&self) -> &EntityVocabulary {
        self.vocab
    }

    /// Runs whichever phase the config selects.
    pub fn run(&self, caption: Option<&str>, embedding: &Embedding) -> Result<GenerationContext> {
        match self.config.mode {
            Mode::Training => {
                let caption = caption.ok_or_else(|| Error::config("training instances need a caption"))?;
                self.run_training_instance(caption, embedding)
            }
            Mode::Inference => self.run_inference_instance(embedding),
        }
    }

    /// Training phase for one caption and its synthetic image embedding.
    /// Fails with [`Error::QualityRejected`] when the pair's CLIPScore is
    /// below the quality threshold.
    pub fn run_training_instance(&self, caption: &str, synthetic: &Embedding) -> Result<GenerationContext> {
        let cfg = &self.config;
        synthetic.ensure_dim(self.store.dim())?;
        let text = self.sources.feature.embed_text(caption)?;
        let score = clip_score(synthetic, &text)?;
        if score < cfg.fusion.tau_quality {
            return Err(Error::QualityRejected {
                score,
                threshold: cfg.fusion.tau_quality,
            });
        }

        let mut stages = Vec::new();
        let fused = if cfg.enable_sif {
            stages.push(Stage::SyntheticFusion);
            fuse_sif(synthetic, &text, &cfg.fusion)?
        } else {
            text
        };
        let query = if !cfg.enable_sir {
            self.sources.retrieval.embed_text(caption)?
        } else if cfg.enable_sif && cfg.training_query == TrainingQuery::Auto {
            fused.clone()
        } else {
            synthetic.clone()
        };

        stages.push(Stage::Retrieval);
        let retrieval = self.store.retrieve(&query, cfg.retrieval_k)?;
        let key = self.vocab.extract(caption);
        let candidates = self.vocab.extract_all(retrieval.captions());
        let entity_sets = if cfg.enable_nef {
            stages.push(Stage::EntityFiltering);
            filter_training(&key, &candidates)
        } else {
            filter_passthrough(&key, &candidates)
        };
        self.finish(fused, retrieval, entity_sets, stages)
    }

    /// Inference phase for one image embedding.
    pub fn run_inference_instance(&self, image: &Embedding) -> Result<GenerationContext> {
        let cfg = &self.config;
        image.ensure_dim(self.store.dim())?;
        if !image.is_normalized() {
            return Err(Error::config("image embedding must be normalized"));
        }
        let mut stages = vec![Stage::Retrieval];
        let retrieval = self.store.retrieve(image, cfg.retrieval_k)?;

        stages.push(Stage::ImageEntityClassification);
        let key: EntitySet = classify_image_entities(image, self.vocab, self.sources.feature, cfg.top_m)?
            .into_iter()
            .collect();
        let candidates = self.vocab.extract_all(retrieval.captions());
        let entity_sets = if cfg.enable_nef {
            stages.push(Stage::EntityFiltering);
            filter_inference(&key, &candidates, image, self.sources.feature, cfg.tau_sim)?
        } else {
            filter_passthrough(&key, &candidates)
        };
        self.finish(image.clone(), retrieval, entity_sets, stages)
    }

    fn finish(
        &self,
        fused: Embedding,
        retrieval: RetrievalResult,
        entity_sets: EntitySets,
        mut stages: Vec<Stage>,
    ) -> Result<GenerationContext> {
        let retrieved = retrieval
            .hits
            .iter()
            .map(|h| self.record_embedding(&h.id).cloned())
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage::RetrievalFusion);
        let attended = fuse_retrieval(&PrefixFeatures::single(&fused), &retrieved, self.weights)?;
        stages.push(Stage::Mapping);
        let mapped = map_to_prefix(&attended, self.weights)?;

        let (suppressed_prefix, suppression_report) = if self.config.enable_as {
            stages.push(Stage::Suppression);
            let negatives = entity_sets
                .negative
                .iter()
                .map(|e| self.sources.feature.embed_entity(e))
                .collect::<Result<Vec<_>>>()?;
            apply_suppression(&mapped, &negatives, &self.config.suppression)?
        } else {
            let report = SuppressionReport::inactive(mapped.len());
            (mapped, report)
        };

        Ok(GenerationContext {
            suppressed_prefix,
            positive_prompt: build_prompt(&entity_sets.positive),
            entity_sets,
            retrieval,
            suppression_report,
            stages,
        })
    }

    fn record_embedding(&self, id: &str) -> Result<&Embedding> {
        self.store
            .get(id)
            .map(|r| &r.embedding)
            .ok_or_else(|| Error::UnknownKey(id.to_string()))
    }

    /// Extractive stand-in for the language decoder; see [`standin_decode`].
    pub fn decode(&self, context: &GenerationContext) -> Result<String> {
        standin_decode(context, self.store, self.vocab)
    }
}

/// Picks the retrieved caption closest (cosine) to the mean suppressed
/// prefix token among those mentioning no negative entity. When every
/// candidate mentions one, the closest caption is returned with the negative
/// mentions cut out. Ties go to the smaller id.
pub fn standin_decode(context: &GenerationContext, store: &Datastore, vocab: &EntityVocabulary) -> Result<String> {
    if context.retrieval.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let mean = context.suppressed_prefix.mean();
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let negative = &context.entity_sets.negative;

    let mut scored = Vec::with_capacity(context.retrieval.len());
    for hit in &context.retrieval.hits {
        let record = store.get(&hit.id).ok_or_else(|| Error::UnknownKey(hit.id.clone()))?;
        record.embedding.ensure_dim(mean.len())?;
        let cos = if mean_norm == 0.0 {
            0.0
        } else {
            record
                .embedding
                .values()
                .iter()
                .zip(&mean)
                .map(|(&a, b)| f64::from(a) * b)
                .sum::<f64>()
                / (mean_norm * record.embedding.norm())
        };
        let mentions = vocab.mentions(&hit.caption);
        let clean = mentions.iter().all(|m| !negative.contains(&m.canonical));
        scored.push((cos, hit, mentions, clean));
    }
    let better = |a: &(f64, &crate::datastore::Hit, _, bool), b: &(f64, &crate::datastore::Hit, _, bool)| {
        b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id))
    };
    scored.sort_by(|a, b| better(a, b));

    if let Some((_, hit, _, _)) = scored.iter().find(|s| s.3) {
        return Ok(hit.caption.clone());
    }
    let (_, hit, mentions, _) = &scored[0];
    let spans: Vec<_> = mentions
        .iter()
        .filter(|m| negative.contains(&m.canonical))
        .map(|m| m.span.clone())
        .collect();
    Ok(cut_spans(&hit.caption, &spans))
}

/// Removes each span together with the whitespace before it (or after it,
/// for a span at the very start).
fn cut_spans(text: &str, spans: &[std::ops::Range<usize>]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for span in spans {
        let mut start = span.start;
        let mut end = span.end;
        while start > cursor {
            match text[..start].chars().next_back() {
                Some(c) if c.is_whitespace() => start -= c.len_utf8(),
                _ => break,
            }
        }
        if start == 0 {
            while let Some(c) = text[end..].chars().next().filter(|c| c.is_whitespace()) {
                end += c.len_utf8();
            }
        }
        out.push_str(&text[cursor..start]);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}
