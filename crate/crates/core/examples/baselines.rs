//! Non-learned and shallow baselines on a synthetic corpus: the keyword rule,
//! and logistic regression over frozen encoder embeddings for a grid of C.
//!
//! cargo run --release --example baselines -- [seed] [separation]

use protolora::corpus::labels_of;
use protolora::encoder::{Encoder, EncoderConfig, Pooling};
use protolora::eval::{confusion, keyword_match, logistic_regression_fit, KeywordRuleSet};
use protolora::model::{embed_sequences, tokenize_all};
use protolora::synth::synth_corpus;
use protolora::tokenizer::build_vocab;

fn main() -> protolora::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("integer seed"));
    let separation: f64 = args.get(1).map_or(0.8, |s| s.parse().expect("separation in [0, 1]"));

    let corpus = synth_corpus(seed, 121, 995, separation)?;
    let truth = labels_of(&corpus.test)?;

    let rules = KeywordRuleSet::builtin();
    let flagged = corpus
        .test
        .iter()
        .map(|r| keyword_match(r, &rules))
        .collect::<protolora::Result<Vec<_>>>()?;
    let report = confusion(&flagged, &truth)?;
    println!(
        "keyword rule        f1 {:.3}  precision {:.3}  recall {:.3}",
        report.f1, report.precision, report.recall
    );

    let vocab = build_vocab(&[corpus.train.clone(), corpus.prototype.clone(), corpus.validation.clone()].concat(), 1)?;
    let config = EncoderConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 64,
        vocab_size: vocab.len(),
        max_len: 32,
        pooling: Pooling::Cls,
    };
    let encoder = Encoder::new(config, None, seed)?;
    let embed = |records| embed_sequences(&encoder, &tokenize_all(records, &vocab, 32)?);
    let x_train = embed(&corpus.train)?;
    let x_val = embed(&corpus.validation)?;
    let x_test = embed(&corpus.test)?;
    let y_train = labels_of(&corpus.train)?;
    let y_val = labels_of(&corpus.validation)?;

    // C is chosen on validation F1, as the tuned baseline would be.
    let mut best = None;
    for c in [0.01, 0.1, 1.0, 10.0, 100.0] {
        let fit = logistic_regression_fit(&x_train, &y_train, c)?;
        let predict = |x: &protolora::tensor::Tensor| -> protolora::Result<Vec<_>> {
            (0..x.dims2()?.0).map(|i| fit.head.classify(x.row(i))).collect()
        };
        let val = confusion(&predict(&x_val)?, &y_val)?;
        let test = confusion(&predict(&x_test)?, &truth)?;
        println!(
            "logreg C={c:<6}     val f1 {:.3}  test f1 {:.3}  ({} iterations, |grad| {:.1e})",
            val.f1, test.f1, fit.iterations, fit.gradient_norm
        );
        if best.as_ref().is_none_or(|(v, _, _)| val.f1 > *v) {
            best = Some((val.f1, c, test.f1));
        }
    }
    let (_, c, f1) = best.expect("non-empty grid");
    println!("logreg selected     C={c}  test f1 {f1:.3}");
    Ok(())
}
