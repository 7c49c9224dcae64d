//! Trains one variant on a seeded synthetic corpus and reports test metrics.
//!
//! cargo run --release --example train_synthetic -- [variant] [seed] [separation]

use std::time::Instant;

use protolora::encoder::{EncoderConfig, Pooling};
use protolora::eval::evaluate_variant;
use protolora::lora::LoraConfig;
use protolora::model::Variant;
use protolora::synth::synth_corpus;
use protolora::tokenizer::build_vocab;
use protolora::train::{train, Splits, TrainConfig};

fn main() -> protolora::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = serde_json::from_value(serde_json::Value::String(
        args.first().cloned().unwrap_or_else(|| "proto-lora".into()),
    ))
    .expect("variant name such as proto-lora or lora-ft");
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("integer seed"));
    let separation: f64 = args.get(2).map_or(0.8, |s| s.parse().expect("separation in [0, 1]"));
    let learning_rate: f64 = args.get(3).map_or(6e-4, |s| s.parse().expect("learning rate"));

    let corpus = synth_corpus(seed, 121, 995, separation)?;
    let vocab_source = [corpus.train.clone(), corpus.prototype.clone(), corpus.validation.clone()].concat();
    let vocab = build_vocab(&vocab_source, 1)?;
    let encoder = EncoderConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 64,
        vocab_size: vocab.len(),
        max_len: 32,
        pooling: Pooling::Cls,
    };
    let uses_lora = !matches!(variant, Variant::ProtoNoLora | Variant::FullFt | Variant::FrozenProto);
    let config = TrainConfig {
        lora: uses_lora.then(|| LoraConfig::with_rank(8)),
        seed,
        variant,
        learning_rate,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let outcome = train(
        &config,
        &encoder,
        &vocab,
        Splits {
            train: &corpus.train,
            validation: &corpus.validation,
            prototype: &corpus.prototype,
        },
    )?;
    for e in &outcome.log {
        println!(
            "epoch {:3}  loss {:.4}  val_f1 {:.3}  lr {:.2e}{}",
            e.epoch,
            e.loss,
            e.validation_f1,
            e.learning_rate,
            if e.stopped_early { "  (stop)" } else { "" }
        );
    }
    let report = evaluate_variant(&outcome.checkpoint, Some(&corpus.prototype), &corpus.test, None)?;
    println!(
        "{variant:?} seed {seed}: best epoch {} | test f1 {:.3} precision {:.3} recall {:.3} | {:.1}s",
        outcome.checkpoint.epoch,
        report.f1,
        report.precision,
        report.recall,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
