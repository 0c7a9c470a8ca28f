#![allow(dead_code)]

use nes::datastore::CaptionRecord;
use nes::{Embedding, EntitySet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn set(items: &[&str]) -> EntitySet {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn emb(values: &[f32]) -> Embedding {
    Embedding::new(values.to_vec()).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
    Embedding::normalized(random_vec(rng, dim)).unwrap()
}

/// Records with shuffled ids; roughly one in eight reuses an earlier
/// embedding so that ties actually occur.
pub fn random_records(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<CaptionRecord> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut out: Vec<CaptionRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let embedding = if i > 0 && rng.gen_ratio(1, 8) {
            out[rng.gen_range(0..i)].embedding.clone()
        } else {
            random_unit(rng, dim)
        };
        out.push(CaptionRecord::new(
            format!("r{:05}", ids[i]),
            format!("caption {i}"),
            embedding,
        ));
    }
    out
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub struct Golden {
    pub instances: Vec<nes::EvalInstance>,
    pub expected: serde_json::Value,
}

pub fn golden() -> Golden {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metrics_golden.json");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    Golden {
        instances: serde_json::from_value(v["instances"].clone()).unwrap(),
        expected: v["expected"].clone(),
    }
}

pub fn ratio(v: &serde_json::Value) -> num_rational::Ratio<u64> {
    v.as_str().unwrap().parse().unwrap()
}
