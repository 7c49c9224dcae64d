//! Deployment-style triage: train on a synthetic corpus, then rank a large
//! unlabeled pool with a small planted positive fraction.
//!
//! cargo run --release --example triage -- [seed] [pool size]

use protolora::cli::rank_predictions;
use protolora::encoder::{EncoderConfig, Pooling};
use protolora::lora::LoraConfig;
use protolora::synth::{synth_corpus, synth_unlabeled};
use protolora::tokenizer::build_vocab;
use protolora::train::{train, Splits, TrainConfig};

fn main() -> protolora::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("integer seed"));
    let pool: usize = args.get(1).map_or(10_000, |s| s.parse().expect("pool size"));

    let corpus = synth_corpus(seed, 121, 995, 0.8)?;
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
        seed,
        ..TrainConfig::default()
    };
    let splits = Splits {
        train: &corpus.train,
        validation: &corpus.validation,
        prototype: &corpus.prototype,
    };
    let model = train(&config, &encoder, &vocab, splits)?.checkpoint;

    let (records, truth) = synth_unlabeled(seed + 1000, pool, 0.01, 0.8)?;
    let scorer = model.scorer(Some(&corpus.prototype))?;
    let emb = model.embed(&records)?;
    let scored = records
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((r.id.clone(), scorer.probabilities(emb.row(i))?.0)))
        .collect::<protolora::Result<Vec<_>>>()?;
    let ranked = rank_predictions(scored, 0.5);

    let flagged = ranked.iter().filter(|r| r.predicted_label.is_positive()).count();
    let planted: std::collections::HashSet<&str> = records
        .iter()
        .zip(&truth)
        .filter(|(_, l)| l.is_positive())
        .map(|(r, _)| r.id.as_str())
        .collect();
    let decile = ranked.len().div_ceil(10);
    let in_top = ranked[..decile].iter().filter(|r| planted.contains(r.id.as_str())).count();
    println!(
        "seed {seed}: flagged {flagged}/{} ({:.2}%), planted in top decile {in_top}/{}",
        ranked.len(),
        100.0 * flagged as f64 / ranked.len() as f64,
        planted.len()
    );
    Ok(())
}
