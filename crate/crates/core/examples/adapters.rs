//! Adapter bookkeeping: parameter counts across ranks, the zero-initialized
//! identity at step 0, and merging `W₀ + scaling·A·B` back into the base.
//!
//! cargo run --release --example adapters

use protolora::encoder::{Encoder, EncoderConfig, Pooling};
use protolora::lora::{LoraConfig, LoraTarget};
use protolora::corpus::StudyRecord;
use protolora::tokenizer::{build_vocab, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn main() -> protolora::Result<()> {
    let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let vocab = build_vocab(&[StudyRecord::new("V", words.join(" "), "", "")], 1)?;
    let config = EncoderConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 128,
        vocab_size: vocab.len(),
        max_len: 16,
        pooling: Pooling::Cls,
    };

    let full = Encoder::new(config.clone(), None, 1)?;
    println!("full fine-tuning trains {} parameters", full.trainable_parameter_count());
    for rank in [1, 2, 4, 8, 16, 32] {
        let enc = Encoder::new(config.clone(), Some(LoraConfig::with_rank(rank)), 1)?;
        println!(
            "rank {rank:2}: {:6} adapter parameters, {:6} trainable in total",
            enc.lora_parameter_count(),
            enc.trainable_parameter_count()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<TokenSequence> = (0..6)
        .map(|_| {
            let words: Vec<String> = (0..10).map(|_| format!("w{}", rng.random_range(0..50))).collect();
            protolora::tokenizer::tokenize(&words.join(" "), &vocab, 16)
        })
        .collect::<protolora::Result<_>>()?;

    let mut adapted = Encoder::new(config.clone(), Some(LoraConfig::with_rank(4)), 1)?;
    let base = Encoder::new(config, None, 1)?;
    let gap = max_abs_diff(adapted.encode(&batch)?.data(), base.encode(&batch)?.data());
    println!("zero-initialized adapters change embeddings by {gap:e}");

    // Give B nonzero values, then compare the adapted path with the merged weights.
    for (name, t) in adapted.params_mut().iter_mut() {
        if name.ends_with("lora_b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    }
    let adapter = adapted.adapter(0, LoraTarget::Query).expect("layer 0 query adapter");
    println!("layer 0 query adapter: rank {}, {} parameters", adapter.rank(), adapter.trainable_parameters());
    let merged = adapted.merged();
    let gap = max_abs_diff(adapted.encode(&batch)?.data(), merged.encode(&batch)?.data());
    println!("adapted vs merged embeddings differ by {gap:.2e}");
    Ok(())
}
