//! Sweeps the four stage toggles over seeded toy corpora and prints CHAIR and
//! hallucination attribution for each combination.
//!
//! `cargo run --example ablation_grid -- [seeds]`

use nes::pipeline::{Mode, PipelineConfig};
use nes::suppression::Selection;
use nes::toy::{ToyConfig, ToyCorpus};

fn main() -> nes::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    println!(
        "{:>5} {:>4} {:>4} {:>4} {:>4} {:>8} {:>8} {:>7} {:>6} {:>6}",
        "seed", "SIR", "SIF", "NEF", "AS", "CHAIR-S", "CHAIR-I", "recall", "hall", "retr"
    );
    for seed in 0..seeds {
        let toy = ToyCorpus::generate(ToyConfig::with_seed(seed))?;
        for mask in (0..16u8).rev() {
            let on = |bit: u8| mask & (1 << bit) != 0;
            let mut cfg = PipelineConfig::new(2, Selection::TopK).with_stages(on(3), on(2), on(1), on(0));
            cfg.mode = Mode::Inference;
            let r = toy.evaluate_inference(cfg, 4)?;
            let flag = |b: bool| if b { "on" } else { "-" };
            println!(
                "{seed:>5} {:>4} {:>4} {:>4} {:>4} {:>8.4} {:>8.4} {:>7.4} {:>6} {:>6}",
                flag(on(3)),
                flag(on(2)),
                flag(on(1)),
                flag(on(0)),
                r.chair_s,
                r.chair_i,
                r.recall,
                r.total_hallucinations,
                r.retrieval_sourced
            );
        }
    }
    Ok(())
}
