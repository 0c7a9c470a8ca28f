//! Quality-gates synthetic image embeddings against their captions and mixes
//! the survivors with each fusion strategy.
//!
//! `cargo run --example synthetic_fusion`

use nes::fusion::{clip_score, fuse_sif, quality_gate};
use nes::{Embedding, EmbeddingSource, FusionConfig, FusionStrategy, HashEmbedder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nes::Result<()> {
    let embedder = HashEmbedder::new(64, 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let captions = ["a dog on a skateboard", "a horse in the snow", "a plate of pizza"];

    let mut pairs = Vec::new();
    for (i, c) in captions.iter().enumerate() {
        let text = embedder.embed_text(c)?;
        // stand-ins for generated images: the caption vector plus growing noise
        let scale = 0.4 * (i as f32 + 1.0);
        let noisy: Vec<f32> = text
            .values()
            .iter()
            .map(|v| v + scale * rng.gen_range(-0.3..0.3))
            .collect();
        pairs.push((Embedding::normalized(noisy)?, text));
    }

    let config = FusionConfig::default();
    let kept = quality_gate(&pairs, config.tau_quality)?;
    for (i, (syn, text)) in pairs.iter().enumerate() {
        let score = clip_score(syn, text)?;
        println!(
            "{:<24} CLIPScore {score:.3} {}",
            captions[i],
            if kept.contains(&i) { "kept" } else { "discarded" }
        );
    }

    for strategy in [
        FusionStrategy::ClipscoreForward,
        FusionStrategy::ClipscoreReverse,
        FusionStrategy::Fixed { alpha: 0.5 },
    ] {
        let cfg = FusionConfig { strategy, ..config };
        for &i in &kept {
            let (syn, text) = &pairs[i];
            let fused = fuse_sif(syn, text, &cfg)?;
            println!(
                "{strategy:?} {:<24} cos(fused, text) {:.3}",
                captions[i],
                fused.dot(text)?
            );
        }
    }
    Ok(())
}
