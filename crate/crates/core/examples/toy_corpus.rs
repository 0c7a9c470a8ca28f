//! Writes a seeded toy corpus to disk in the formats the `nes` binary reads,
//! ready for `nes ingest` and `nes run`.
//!
//! `cargo run --example toy_corpus -- OUT_DIR [SEED]`

use nes::toy::{ToyConfig, ToyCorpus};

fn main() -> nes::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "toy-data".to_string());
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let toy = ToyCorpus::generate(ToyConfig::with_seed(seed))?;
    let files = toy.write_files(&dir, 4)?;
    println!("store captions     {}", files.captions.display());
    println!("store embeddings   {}", files.caption_embeddings.display());
    println!("vocabulary         {}", files.vocab.display());
    println!("synonyms           {}", files.synonyms.display());
    println!("image embeddings   {}", files.images.display());
    println!("attention weights  {}", files.weights.display());
    println!("inference batch    {}", files.inference_input.display());
    println!("training batch     {}", files.training_input.display());
    println!("run config         {}", files.config.display());
    Ok(())
}
