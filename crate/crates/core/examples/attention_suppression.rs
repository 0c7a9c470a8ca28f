//! Scores prefix tokens by how strongly negative entities attend to them and
//! dampens the selected tokens under every selection strategy.
//!
//! `cargo run --example attention_suppression -- [LAMBDA]`

use nes::suppression::apply_suppression;
use nes::{EmbeddingSource, HashEmbedder, PrefixFeatures, Selection, SuppressionConfig};

fn main() -> nes::Result<()> {
    let lambda = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let source = HashEmbedder::new(32, 2)?;

    // four prefix tokens, one of which is dominated by the "kite" direction
    let words = ["dog", "grass", "kite", "park"];
    let tokens = words
        .iter()
        .map(|w| {
            Ok(source
                .embed_entity(w)?
                .values()
                .iter()
                .map(|&v| 12.0 * f64::from(v))
                .collect())
        })
        .collect::<nes::Result<Vec<Vec<f64>>>>()?;
    let prefix = PrefixFeatures::new(tokens)?;
    let negatives = [source.embed_entity("kite")?];

    for selection in [
        Selection::FixedThreshold { tau_neg: 0.3 },
        Selection::TopK,
        Selection::TopKMinusOne,
        Selection::Proportional { proportion: 0.5 },
    ] {
        let config = SuppressionConfig { selection, lambda };
        let (out, report) = apply_suppression(&prefix, &negatives, &config)?;
        let scores: Vec<String> = report.scores.iter().map(|s| format!("{s:.3}")).collect();
        let norms: Vec<String> = out
            .tokens()
            .iter()
            .map(|t| format!("{:.2}", t.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect();
        println!(
            "{selection:?}\n  scores {scores:?}\n  selected {:?}\n  token norms {norms:?}",
            report.selected
        );
    }
    Ok(())
}
