//! Builds a datastore from a handful of captions and runs exact top-k
//! retrieval for a free-text query.
//!
//! `cargo run --example caption_retrieval -- "a dog with a ball" [K]`

use nes::{CaptionRecord, Datastore, EmbeddingSource, HashEmbedder};

const CAPTIONS: [&str; 8] = [
    "a dog plays with a red ball",
    "a puppy runs after a ball on the grass",
    "a man flies a kite at the beach",
    "two horses stand in a field",
    "a cat sleeps next to a dog",
    "a sailboat on a calm lake",
    "a bird sits on a wooden bench",
    "a dog catches a frisbee",
];

fn main() -> nes::Result<()> {
    let mut args = std::env::args().skip(1);
    let query = args.next().unwrap_or_else(|| "a dog with a ball".to_string());
    let k = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let embedder = HashEmbedder::new(256, 1)?;
    let records = CAPTIONS
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(CaptionRecord::new(format!("c{i}"), *c, embedder.embed_text(c)?)))
        .collect::<nes::Result<Vec<_>>>()?;
    let store = Datastore::build(records)?;

    let hits = store.retrieve(&embedder.embed_text(&query)?, k)?;
    println!("query: {query}");
    for h in &hits.hits {
        println!("  {:>3}  {:.4}  {}", h.id, h.score, h.caption);
    }
    Ok(())
}
