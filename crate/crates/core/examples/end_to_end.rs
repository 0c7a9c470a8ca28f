//! Runs one training instance and one inference instance of a seeded toy
//! corpus through every stage, then decodes both with the extractive
//! stand-in decoder.
//!
//! `cargo run --example end_to_end -- [SEED]`

use nes::toy::{ToyConfig, ToyCorpus};
use nes::{Error, GenerationContext, Mode, Pipeline, PipelineConfig, Selection, Sources};

fn show(label: &str, ctx: &GenerationContext, decoded: &str) {
    println!("== {label}");
    println!("stages     {:?}", ctx.stages);
    println!("retrieved  {:?}", ctx.retrieval.ids());
    println!("key        {:?}", ctx.entity_sets.key);
    println!("positive   {:?}", ctx.entity_sets.positive);
    println!("negative   {:?}", ctx.entity_sets.negative);
    println!(
        "suppressed {:?} (lambda {})",
        ctx.suppression_report.selected, ctx.suppression_report.lambda_applied
    );
    println!("prompt     {}", ctx.positive_prompt);
    println!("decoded    {decoded}\n");
}

fn main() -> nes::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let toy = ToyCorpus::generate(ToyConfig::with_seed(seed))?;
    let weights = toy.weights(4)?;

    let training = Pipeline::new(
        &toy.store,
        &toy.vocab,
        Sources::shared(&toy.embedder),
        &weights,
        PipelineConfig::new(2, Selection::TopK),
    )?;
    for t in &toy.training {
        match training.run_training_instance(&t.caption, &t.synthetic) {
            Ok(ctx) => {
                show(&format!("training: {}", t.caption), &ctx, &training.decode(&ctx)?);
                break;
            }
            Err(e @ Error::QualityRejected { .. }) => println!("skipped {}: {e}", t.id),
            Err(e) => return Err(e),
        }
    }

    let mut cfg = PipelineConfig::new(2, Selection::TopK);
    cfg.mode = Mode::Inference;
    let inference = Pipeline::new(&toy.store, &toy.vocab, Sources::shared(&toy.embedder), &weights, cfg)?;
    let image = &toy.images[0];
    let ctx = inference.run_inference_instance(&image.embedding)?;
    show(
        &format!("inference: image showing {:?}", image.entities),
        &ctx,
        &inference.decode(&ctx)?,
    );
    Ok(())
}
