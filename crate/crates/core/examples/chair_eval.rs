//! Computes CHAIR, entity recall, hallucination attribution and retrieval
//! diagnostics for a few generated captions.
//!
//! `cargo run --example chair_eval`

use nes::metrics::{chair_counts, evaluate, retrieval_counts};
use nes::{EntityVocabulary, EvalInstance};

fn main() -> nes::Result<()> {
    let vocab = EntityVocabulary::parse("dog\nfrisbee\nkite\nperson\ncar\ntree\n", Some("person\tman, woman\n"))?;
    let rows = [
        (
            "a dog catches a frisbee",
            vec!["a dog with a frisbee on grass"],
            vec!["a dog and a kite"],
        ),
        (
            "a man flies a kite near a car",
            vec!["a woman flies a kite"],
            vec!["a kite over a car park"],
        ),
        (
            "a tree in a field",
            vec!["a lone tree", "a tree on a hill"],
            vec!["a tree with a dog"],
        ),
    ];
    let instances: Vec<EvalInstance> = rows
        .iter()
        .map(|(g, refs, retrieved)| {
            EvalInstance::from_captions(&vocab, g, refs.iter().copied(), retrieved.iter().copied())
        })
        .collect();

    let counts = chair_counts(&instances)?;
    println!(
        "CHAIR-S {} ({:.3})",
        counts.chair_s(),
        nes::metrics::chair_scores(&instances)?.0
    );
    println!("CHAIR-I {}", counts.chair_i());
    let report = evaluate(&instances)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let pairs: Vec<_> = instances
        .iter()
        .map(|i| (i.retrieved.clone(), i.ground_truth.clone()))
        .collect();
    let r = retrieval_counts(&pairs)?;
    println!("ACC {}  RC {}  AHC {}  DHC {}", r.acc(), r.rc(), r.ahc(), r.dhc());
    Ok(())
}
