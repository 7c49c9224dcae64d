//! Finite-difference check of the episode loss with respect to the LoRA
//! factors of a small encoder.
//!
//! cargo run --release --example gradient_check -- [euclidean|cosine]

use protolora::corpus::{Label, StudyRecord};
use protolora::encoder::{Encoder, EncoderConfig, Mode, Pooling};
use protolora::gradcheck::finite_difference_check;
use protolora::lora::LoraConfig;
use protolora::proto::{episode_loss, DistanceMetric, TapePrototypes};
use protolora::tensor::Tensor;
use protolora::tokenizer::{build_vocab, tokenize_record};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> protolora::Result<()> {
    let metric = match std::env::args().nth(1).as_deref() {
        Some("cosine") => DistanceMetric::Cosine,
        _ => DistanceMetric::Euclidean,
    };
    // Support p p n n, then query p p n n.
    let texts = [
        ("pembrolizumab response in melanoma", Label::Positive),
        ("nivolumab after checkpoint blockade", Label::Positive),
        ("cisplatin xenograft toxicity", Label::Negative),
        ("crispr knockout in organoid lines", Label::Negative),
        ("ipilimumab and pd-1 in renal cancer", Label::Positive),
        ("anti ctla-4 immunotherapy cohort", Label::Positive),
        ("radiation dose in glioma", Label::Negative),
        ("methylation profiles of tumors", Label::Negative),
    ];
    let records: Vec<StudyRecord> = texts
        .iter()
        .enumerate()
        .map(|(i, (t, l))| StudyRecord::new(format!("R{i}"), *t, "", "").with_label(*l))
        .collect();
    let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Negative];
    let vocab = build_vocab(&records, 1)?;
    let seqs = records
        .iter()
        .map(|r| tokenize_record(r, &vocab, 10))
        .collect::<protolora::Result<Vec<_>>>()?;
    let config = EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        vocab_size: vocab.len(),
        max_len: 10,
        pooling: Pooling::Cls,
    };
    let mut encoder = Encoder::new(config, Some(LoraConfig::with_rank(2)), 3)?;

    // With B = 0 the gradient of A vanishes, so both factors get unit-scale values.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut slots = Vec::new();
    for (i, (name, t)) in encoder.params_mut().iter_mut().enumerate() {
        if name.contains(".lora_") {
            t.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            slots.push(i);
        }
    }
    let params: Vec<Tensor> = slots.iter().map(|&i| encoder.params().iter().nth(i).unwrap().1.clone()).collect();

    let worst = finite_difference_check(
        |tape, vars| {
            let mut all = encoder.params().bind_frozen(tape);
            for (slot, v) in slots.iter().zip(vars) {
                all[*slot] = *v;
            }
            let emb = encoder.forward(tape, &all, &seqs, Mode::Eval)?;
            let support = tape.slice_rows(emb, 0, 4)?;
            let query = tape.slice_rows(emb, 4, 4)?;
            let protos = TapePrototypes::from_support(tape, support, &labels)?;
            episode_loss(tape, query, &labels, &protos, metric)
        },
        &params,
        1e-5,
    )?;
    println!("{metric:?}: {} adapter tensors, worst relative error {worst:.2e}", params.len());
    Ok(())
}
