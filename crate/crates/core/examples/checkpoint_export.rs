//! Trains briefly, saves and reloads the checkpoint, and writes embeddings as
//! TSV, showing that a reloaded model reproduces the embeddings bit for bit.
//!
//! cargo run --release --example checkpoint_export -- [out_dir]

use std::fs;
use std::path::PathBuf;

use protolora::encoder::{EncoderConfig, Pooling};
use protolora::lora::LoraConfig;
use protolora::model::Checkpoint;
use protolora::synth::synth_corpus;
use protolora::tokenizer::build_vocab;
use protolora::train::{train, Splits, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("protolora-export"), PathBuf::from);
    fs::create_dir_all(&out)?;

    let corpus = synth_corpus(11, 64, 400, 0.8)?;
    let vocab = build_vocab(&[corpus.train.clone(), corpus.prototype.clone(), corpus.validation.clone()].concat(), 1)?;
    let encoder = EncoderConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 64,
        vocab_size: vocab.len(),
        max_len: 32,
        pooling: Pooling::Cls,
    };
    let config = TrainConfig {
        lora: Some(LoraConfig::with_rank(8)),
        max_epochs: 10,
        seed: 11,
        ..TrainConfig::default()
    };
    let splits = Splits {
        train: &corpus.train,
        validation: &corpus.validation,
        prototype: &corpus.prototype,
    };
    let outcome = train(&config, &encoder, &vocab, splits)?;

    let path = out.join("checkpoint.json");
    outcome.checkpoint.save(&path)?;
    let reloaded = Checkpoint::load(&path)?;
    println!("saved {} ({} bytes), best epoch {}", path.display(), fs::metadata(&path)?.len(), reloaded.epoch);

    let before = outcome.checkpoint.embed(&corpus.test)?;
    let after = reloaded.embed(&corpus.test)?;
    let identical = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("reloaded embeddings identical: {identical}");

    let (n, d) = after.dims2()?;
    let mut tsv = String::new();
    for (i, record) in corpus.test.iter().enumerate() {
        let label = record.label.map_or("", |l| if l.is_positive() { "positive" } else { "negative" });
        let values: Vec<String> = after.row(i).iter().map(|v| v.to_string()).collect();
        tsv.push_str(&format!("{}\t{label}\t{}\n", record.id, values.join("\t")));
    }
    let tsv_path = out.join("embeddings.tsv");
    fs::write(&tsv_path, tsv)?;
    println!("wrote {n} × {d} embeddings to {}", tsv_path.display());
    Ok(())
}
