//! Extracts entities from retrieved captions and splits them into positive
//! and negative sets, once with ground-truth keys and once with
//! similarity checks against an image embedding.
//!
//! `cargo run --example entity_filtering`

use nes::entities::{filter_inference, filter_training};
use nes::{Embedding, EmbeddingSource, EntityVocabulary, HashEmbedder};

fn main() -> nes::Result<()> {
    let vocab = EntityVocabulary::parse(
        "dog\nfrisbee\nkite\nperson\ntree\nhot dog\n",
        Some("dog\tpuppy\nperson\tman, woman\n"),
    )?;
    let caption = "A puppy leaps for a frisbee.";
    let retrieved = [
        "a dog catches a frisbee near a tree",
        "a man throws a frisbee to his dog",
        "a dog chases a kite",
    ];

    let key = vocab.extract(caption);
    let candidates = vocab.extract_all(retrieved);
    println!("key entities        {key:?}");
    println!("retrieved entities  {candidates:?}");

    let training = filter_training(&key, &candidates);
    println!(
        "\nground-truth split: positive {:?}, negative {:?}",
        training.positive, training.negative
    );

    // An "image" that shows a dog, a frisbee and a tree, built from entity
    // prompts so the similarity check has something to find.
    let source = HashEmbedder::new(128, 3)?;
    let mut pixels = vec![0.0f32; source.dim()];
    for e in ["dog", "frisbee", "tree"] {
        for (p, v) in pixels.iter_mut().zip(source.embed_entity(e)?.values()) {
            *p += v;
        }
    }
    let image = Embedding::normalized(pixels)?;
    // Entity prompts share the "A photo of" template, so cosines against the
    // hashing encoder sit high and only a strict threshold separates them.
    for tau in [0.2, 0.85] {
        let sets = filter_inference(&key, &candidates, &image, &source, tau)?;
        println!(
            "similarity split at {tau}: positive {:?}, negative {:?}",
            sets.positive, sets.negative
        );
    }
    Ok(())
}
