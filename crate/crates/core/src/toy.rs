//! Seeded toy world for end-to-end runs.
//!
//! Scenes hold two entities. An image embedding is the normalized sum of the
//! bare entity terms' hash embeddings plus uniform noise. Store captions
//! describe random scenes, and a block of spurious captions describes the
//! evaluation scenes with one extra entity injected, which is the
//! retrieval-induced hallucination the pipeline is meant to catch.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::RunConfig;
use crate::datastore::{write_captions, CaptionRecord, Datastore};
use crate::embedder::{write_binary, Embedding, EmbeddingSource, HashEmbedder, SourceSpec};
use crate::entities::{EntitySet, EntityVocabulary};
use crate::error::Result;
use crate::fusion::AttentionWeights;
use crate::metrics::{evaluate, EvalInstance, EvalReport};
use crate::pipeline::{Pipeline, PipelineConfig, Sources};
use crate::suppression::Selection;

pub const ENTITIES: [&str; 12] = [
    "dog", "cat", "kite", "ball", "car", "tree", "person", "bench", "bird", "frisbee", "horse", "boat",
];

const SYNONYMS: [(&str, &str); 4] = [
    ("dog", "puppy"),
    ("car", "automobile"),
    ("person", "man"),
    ("boat", "sailboat"),
];

const STORE_TEMPLATES: [&str; 4] = [
    "a {a} next to a {b}",
    "a {a} and a {b} in a park",
    "there is a {a} near a {b}",
    "a {a} sitting beside a {b}",
];

const TRAINING_TEMPLATES: [&str; 3] = [
    "a picture of a {a} with a {b}",
    "someone photographed a {a} close to a {b}",
    "a {a} is seen together with a {b}",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub dim: usize,
    pub clean_records: usize,
    pub spurious_records: usize,
    pub images: usize,
    pub training: usize,
    /// Norm of the noise added to a unit-norm visual signal.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            dim: 128,
            clean_records: 40,
            spurious_records: 10,
            images: 20,
            training: 20,
            noise: 0.35,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        ToyConfig {
            seed,
            ..ToyConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyImage {
    pub id: String,
    pub entities: EntitySet,
    pub references: Vec<String>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone)]
pub struct ToyTraining {
    pub id: String,
    pub caption: String,
    pub synthetic: Embedding,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub config: ToyConfig,
    pub vocab: EntityVocabulary,
    pub embedder: HashEmbedder,
    pub store: Datastore,
    /// Ids of the captions carrying an injected entity.
    pub spurious_ids: Vec<String>,
    pub images: Vec<ToyImage>,
    pub training: Vec<ToyTraining>,
}

/// Paths produced by [`ToyCorpus::write_files`].
#[derive(Debug, Clone)]
pub struct ToyFiles {
    pub captions: PathBuf,
    pub caption_embeddings: PathBuf,
    pub vocab: PathBuf,
    pub synonyms: PathBuf,
    pub images: PathBuf,
    pub weights: PathBuf,
    pub inference_input: PathBuf,
    pub training_input: PathBuf,
    pub config: PathBuf,
}

pub fn vocab_text() -> String {
    ENTITIES.iter().map(|e| format!("{e}\n")).collect()
}

pub fn synonyms_text() -> String {
    SYNONYMS.iter().map(|(c, s)| format!("{c}\t{s}\n")).collect()
}

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replace("{a}", a).replace("{b}", b)
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn scene(&mut self) -> [&'static str; 2] {
        let idx = sample(&mut self.rng, ENTITIES.len(), 2);
        [ENTITIES[idx.index(0)], ENTITIES[idx.index(1)]]
    }

    fn extra(&mut self, scene: &[&str; 2]) -> &'static str {
        loop {
            let e = ENTITIES[self.rng.gen_range(0..ENTITIES.len())];
            if !scene.contains(&e) {
                return e;
            }
        }
    }

    /// A synonym is used in place of the canonical term 30% of the time.
    fn surface(&mut self, entity: &'static str) -> &'static str {
        match SYNONYMS.iter().find(|(c, _)| *c == entity) {
            Some((_, s)) if self.rng.gen_bool(0.3) => s,
            _ => entity,
        }
    }

    fn caption(&mut self, templates: &[&str], scene: &[&'static str; 2]) -> String {
        let t = templates[self.rng.gen_range(0..templates.len())];
        let a = self.surface(scene[0]);
        let b = self.surface(scene[1]);
        fill(t, a, b)
    }

    fn noise(&mut self, dim: usize, scale: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n * scale).collect()
    }
}

/// Scales to unit length. Two single-token entities can hash to the same
/// coordinate with opposite signs, so a zero sum is returned as is.
fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn to_embedding(v: &[f64]) -> Result<Embedding> {
    Embedding::normalized(v.iter().map(|&x| x as f32).collect())
}

fn visual(embedder: &HashEmbedder, scene: &[&str]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; embedder.dim()];
    for e in scene {
        for (a, &v) in acc.iter_mut().zip(embedder.embed_text(e)?.values()) {
            *a += f64::from(v);
        }
    }
    Ok(unit(&acc))
}

impl ToyCorpus {
    pub fn generate(config: ToyConfig) -> Result<Self> {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let embedder = HashEmbedder::new(config.dim, config.seed)?;
        let vocab = EntityVocabulary::parse(&vocab_text(), Some(&synonyms_text()))?;

        let mut images = Vec::with_capacity(config.images);
        let mut scenes = Vec::with_capacity(config.images);
        for i in 0..config.images {
            let scene = s.scene();
            let signal = visual(&embedder, &scene)?;
            let noise = s.noise(config.dim, config.noise);
            let pixels: Vec<f64> = signal.iter().zip(&noise).map(|(a, b)| a + b).collect();
            images.push(ToyImage {
                id: format!("img-{i:03}"),
                entities: scene.iter().map(|e| e.to_string()).collect(),
                references: vec![fill("a {a} with a {b}", scene[0], scene[1])],
                embedding: to_embedding(&pixels)?,
            });
            scenes.push(scene);
        }

        let mut records = Vec::new();
        for i in 0..config.clean_records {
            let scene = s.scene();
            let caption = s.caption(&STORE_TEMPLATES, &scene);
            let emb = embedder.embed_text(&caption)?;
            records.push(CaptionRecord::new(format!("cap-{i:03}"), caption, emb));
        }
        let mut spurious_ids = Vec::new();
        for i in 0..config.spurious_records {
            let scene = scenes
                .get(i % scenes.len().max(1))
                .copied()
                .unwrap_or_else(|| s.scene());
            let extra = s.extra(&scene);
            let caption = format!("{} with a {}", s.caption(&STORE_TEMPLATES, &scene), s.surface(extra));
            let emb = embedder.embed_text(&caption)?;
            let id = format!("spu-{i:03}");
            spurious_ids.push(id.clone());
            records.push(CaptionRecord::new(id, caption, emb));
        }
        let store = Datastore::build(records)?;

        let mut training = Vec::with_capacity(config.training);
        for i in 0..config.training {
            let scene = s.scene();
            let caption = s.caption(&TRAINING_TEMPLATES, &scene);
            let text = embedder.embed_text(&caption)?;
            let signal = visual(&embedder, &scene)?;
            let scale = s.rng.gen_range(0.0..6.0 * config.noise);
            let noise = s.noise(config.dim, scale);
            let pixels: Vec<f64> = text
                .values()
                .iter()
                .zip(&signal)
                .zip(&noise)
                .map(|((&t, v), n)| f64::from(t) + v + n)
                .collect();
            training.push(ToyTraining {
                id: format!("train-{i:03}"),
                caption,
                synthetic: to_embedding(&pixels)?,
            });
        }

        Ok(ToyCorpus {
            config,
            vocab,
            embedder,
            store,
            spurious_ids,
            images,
            training,
        })
    }

    /// Identity attention and mapping weights over `prefix_len` tokens.
    pub fn weights(&self, prefix_len: usize) -> Result<AttentionWeights> {
        AttentionWeights::identity(self.config.dim, prefix_len)
    }

    /// Runs inference over every evaluation image, decodes with the stand-in
    /// decoder and scores the captions against the scene references.
    pub fn evaluate_inference(&self, config: PipelineConfig, prefix_len: usize) -> Result<EvalReport> {
        let weights = self.weights(prefix_len)?;
        let pipeline = Pipeline::new(
            &self.store,
            &self.vocab,
            Sources::shared(&self.embedder),
            &weights,
            config,
        )?;
        let mut instances = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let ctx = pipeline.run_inference_instance(&img.embedding)?;
            ctx.check()?;
            let caption = pipeline.decode(&ctx)?;
            instances.push(EvalInstance::from_captions(
                &self.vocab,
                &caption,
                img.references.iter().map(String::as_str),
                ctx.retrieval.captions(),
            ));
        }
        evaluate(&instances)
    }

    /// Writes everything the command-line tool needs to ingest the store and
    /// run both phases.
    pub fn write_files(&self, dir: impl AsRef<Path>, prefix_len: usize) -> Result<ToyFiles> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let files = ToyFiles {
            captions: dir.join("captions.tsv"),
            caption_embeddings: dir.join("caption_embeddings.nese"),
            vocab: dir.join("vocab.txt"),
            synonyms: dir.join("synonyms.tsv"),
            images: dir.join("images.nese"),
            weights: dir.join("weights.nesw"),
            inference_input: dir.join("inference.jsonl"),
            training_input: dir.join("training.jsonl"),
            config: dir.join("config.json"),
        };
        let records = self.store.records();

        let mut w = BufWriter::new(File::create(&files.captions)?);
        write_captions(&mut w, records.iter().map(|r| (r.id.as_str(), r.caption.as_str())))?;
        w.flush()?;

        let mut w = BufWriter::new(File::create(&files.caption_embeddings)?);
        write_binary(
            &mut w,
            self.config.dim,
            records.iter().map(|r| (r.id.as_str(), r.embedding.values())),
        )?;
        w.flush()?;

        fs::write(&files.vocab, vocab_text())?;
        fs::write(&files.synonyms, synonyms_text())?;

        let mut w = BufWriter::new(File::create(&files.images)?);
        let synthetic_keys: Vec<String> = self.training.iter().map(|t| format!("{}-syn", t.id)).collect();
        write_binary(
            &mut w,
            self.config.dim,
            self.images
                .iter()
                .map(|img| (img.id.as_str(), img.embedding.values()))
                .chain(
                    self.training
                        .iter()
                        .zip(&synthetic_keys)
                        .map(|(t, k)| (k.as_str(), t.synthetic.values())),
                ),
        )?;
        w.flush()?;

        self.weights(prefix_len)?.save(&files.weights)?;

        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            caption: Option<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            image_key: Option<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            synthetic_key: Option<&'a str>,
            references: Vec<&'a str>,
        }

        let mut w = BufWriter::new(File::create(&files.inference_input)?);
        for img in &self.images {
            let line = Line {
                id: &img.id,
                caption: None,
                image_key: Some(&img.id),
                synthetic_key: None,
                references: img.references.iter().map(String::as_str).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(&files.training_input)?);
        for (t, key) in self.training.iter().zip(&synthetic_keys) {
            let line = Line {
                id: &t.id,
                caption: Some(&t.caption),
                image_key: None,
                synthetic_key: Some(key),
                references: vec![&t.caption],
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        RunConfig {
            pipeline: PipelineConfig::new(2, Selection::TopK),
            vocab: "vocab.txt".into(),
            synonyms: Some("synonyms.tsv".into()),
            embeddings: "images.nese".into(),
            source: SourceSpec::Hash {
                dim: self.config.dim,
                seed: self.embedder.seed(),
            },
            retrieval_source: None,
            weights: Some("weights.nesw".into()),
            prefix_len,
            seed: self.config.seed,
        }
        .save(&files.config)?;

        Ok(files)
    }
}
