//! Embeds a few captions with the deterministic hashing encoder and prints
//! their pairwise cosine similarities.
//!
//! `cargo run --example hash_embedding -- [DIM] [SEED]`

use nes::{EmbeddingSource, HashEmbedder};

fn main() -> nes::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let embedder = HashEmbedder::new(dim, seed)?;

    let texts = [
        "A dog catches a frisbee in the park.",
        "a DOG catches a Frisbee in the park",
        "A dog chases a kite on the beach.",
        "Two cats sleep on a couch.",
    ];
    let vectors = texts
        .iter()
        .map(|t| embedder.embed_text(t))
        .collect::<nes::Result<Vec<_>>>()?;
    for (i, a) in texts.iter().enumerate() {
        for (j, b) in texts.iter().enumerate().skip(i + 1) {
            println!("{:+.4}  {a:?} ~ {b:?}", vectors[i].dot(&vectors[j])?);
        }
    }
    let entity = embedder.embed_entity("dog")?;
    println!("\nentity prompt for \"dog\" has norm {:.6}", entity.norm());
    Ok(())
}
