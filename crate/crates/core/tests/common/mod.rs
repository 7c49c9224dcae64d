//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use protolora::corpus::{Label, StudyRecord};
use protolora::encoder::{Encoder, EncoderConfig, Mode, Pooling};
use protolora::error::Result;
use protolora::lora::LoraConfig;
use protolora::proto::{episode_loss, DistanceMetric, TapePrototypes};
use protolora::tape::{Tape, Var};
use protolora::tensor::Tensor;
use protolora::tokenizer::{build_vocab, tokenize_record, TokenSequence, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub fn gaussian(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(lo, hi).unwrap();
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| u.sample(&mut rng)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry gets a distinct weight.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = gaussian(tape.shape(out), 1.0, seed);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// One finite-difference case per tape op: name, scalar loss, inputs.
pub fn op_cases() -> Vec<(&'static str, Loss, Vec<Tensor>)> {
    let m34 = || gaussian(&[3, 4], 1.0, 1);
    let m34b = || gaussian(&[3, 4], 1.0, 2);
    let v4 = || gaussian(&[4], 1.0, 3);
    let w = |f: fn(&mut Tape, &[Var]) -> Result<Var>| -> Loss {
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let out = f(t, v)?;
            weighted_sum(t, out, 99)
        })
    };
    vec![
        ("matmul", w(|t, v| t.matmul(v[0], v[1])), vec![m34(), gaussian(&[4, 2], 1.0, 4)]),
        ("add", w(|t, v| t.add(v[0], v[1])), vec![m34(), m34b()]),
        ("sub", w(|t, v| t.sub(v[0], v[1])), vec![m34(), m34b()]),
        ("mul", w(|t, v| t.mul(v[0], v[1])), vec![m34(), m34b()]),
        ("div", w(|t, v| t.div(v[0], v[1])), vec![m34(), uniform(&[3, 4], 0.5, 2.0, 5)]),
        ("add_row", w(|t, v| t.add_row(v[0], v[1])), vec![m34(), v4()]),
        ("sub_row", w(|t, v| t.sub_row(v[0], v[1])), vec![m34(), v4()]),
        ("affine", w(|t, v| Ok(t.affine(v[0], -1.5, 0.25))), vec![m34()]),
        ("scale", w(|t, v| Ok(t.scale(v[0], 2.5))), vec![m34()]),
        ("sqrt", w(|t, v| t.sqrt(v[0])), vec![uniform(&[3, 4], 0.3, 3.0, 6)]),
        ("gelu", w(|t, v| Ok(t.gelu(v[0]))), vec![gaussian(&[3, 4], 2.0, 7)]),
        ("sum", Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }), vec![m34()]),
        ("mean", Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.mean(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }), vec![m34()]),
        ("row_sums", w(|t, v| Ok(t.row_sums(v[0]))), vec![m34()]),
        ("mean_rows", w(|t, v| t.mean_rows(v[0])), vec![m34()]),
        ("slice_rows", w(|t, v| t.slice_rows(v[0], 1, 2)), vec![m34()]),
        ("concat_rows", w(|t, v| t.concat_rows(&[v[0], v[1]])), vec![m34(), gaussian(&[2, 4], 1.0, 8)]),
        ("stack_cols", w(|t, v| t.stack_cols(&[v[0], v[1]])), vec![v4(), gaussian(&[4], 1.0, 9)]),
        ("gather_rows", w(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1])), vec![m34()]),
        ("transpose", w(|t, v| Ok(t.transpose(v[0]))), vec![m34()]),
        ("reshape", w(|t, v| t.reshape(v[0], &[2, 6])), vec![m34()]),
        ("softmax", w(|t, v| t.softmax(v[0])), vec![m34()]),
        ("layer_norm", w(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)), vec![m34(), v4(), gaussian(&[4], 1.0, 10)]),
        ("attention", w(|t, v| t.attention(v[0], v[1], v[2], &[3, 2], 3, 2)), vec![
            gaussian(&[6, 4], 1.0, 11),
            gaussian(&[6, 4], 1.0, 12),
            gaussian(&[6, 4], 1.0, 13),
        ]),
        ("cross_entropy", Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 2, 1])), vec![gaussian(&[3, 3], 1.5, 14)]),
    ]
}

/// Labeled toy records built from a few planted words.
pub fn toy_records() -> Vec<StudyRecord> {
    let texts = [
        ("p1", "pd-1 blockade melanoma", Label::Positive),
        ("p2", "nivolumab therapy tumor", Label::Positive),
        ("p3", "checkpoint inhibitor dose", Label::Positive),
        ("p4", "ctla-4 antibody melanoma cohort", Label::Positive),
        ("n1", "knockout mouse liver", Label::Negative),
        ("n2", "chemotherapy cisplatin tumor", Label::Negative),
        ("n3", "crispr screen cells", Label::Negative),
        ("n4", "organoid culture methylation profiling", Label::Negative),
    ];
    texts
        .iter()
        .map(|(id, t, l)| StudyRecord::new(*id, *t, "gene expression", "").with_label(*l))
        .collect()
}

pub fn tiny_encoder(vocab: &Vocabulary, lora: Option<LoraConfig>, pooling: Pooling) -> Encoder {
    let cfg = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 16,
        vocab_size: vocab.len(),
        max_len: 10,
        pooling,
    };
    Encoder::new(cfg, lora, 21).unwrap()
}

pub fn sequences(records: &[StudyRecord], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    records.iter().map(|r| tokenize_record(r, vocab, max_len).unwrap()).collect()
}

/// Adapter factors of an encoder with non-zero `B`, the batch, and the
/// loss `encode → prototypes → episode_loss` as a function of those factors.
pub fn lora_path_case(metric: DistanceMetric) -> (Loss, Vec<Tensor>) {
    let records = toy_records();
    let vocab = build_vocab(&records, 1).unwrap();
    let mut encoder = tiny_encoder(&vocab, Some(LoraConfig::with_rank(2)), Pooling::Cls);
    let mut seed = 40;
    for (name, t) in encoder.params_mut().iter_mut() {
        if name.ends_with("lora_b") || name.ends_with("lora_a") {
            seed += 1;
            let g = gaussian(t.shape(), 1.0, seed);
            t.data_mut().copy_from_slice(g.data());
        }
    }
    let slots: Vec<usize> = encoder
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.contains(".lora_"))
        .map(|(i, _)| i)
        .collect();
    let params: Vec<Tensor> = slots.iter().map(|&i| encoder.params().iter().nth(i).unwrap().1.clone()).collect();
    // Support: p1 p2 n1 n2; query: p3 p4 n3 n4.
    let order = [0, 1, 4, 5, 2, 3, 6, 7];
    let batch_records: Vec<StudyRecord> = order.iter().map(|&i| records[i].clone()).collect();
    let batch = sequences(&batch_records, &vocab, encoder.config().max_len);
    let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Negative];
    let loss: Loss = Box::new(move |tape: &mut Tape, vars: &[Var]| {
        let mut all = encoder.params().bind_frozen(tape);
        for (slot, v) in slots.iter().zip(vars) {
            all[*slot] = *v;
        }
        let emb = encoder.forward(tape, &all, &batch, Mode::Eval)?;
        let support = tape.slice_rows(emb, 0, 4)?;
        let query = tape.slice_rows(emb, 4, 4)?;
        let protos = TapePrototypes::from_support(tape, support, &labels)?;
        episode_loss(tape, query, &labels, &protos, metric)
    });
    (loss, params)
}

/// Episode loss as a function of raw support and query embeddings.
pub fn embedding_loss_case(metric: DistanceMetric) -> (Loss, Vec<Tensor>) {
    let support_labels = [Label::Positive, Label::Negative, Label::Positive, Label::Negative, Label::Positive];
    let query_labels = [Label::Negative, Label::Positive, Label::Positive, Label::Negative];
    let loss: Loss = Box::new(move |tape: &mut Tape, v: &[Var]| {
        let protos = TapePrototypes::from_support(tape, v[0], &support_labels)?;
        episode_loss(tape, v[1], &query_labels, &protos, metric)
    });
    (loss, vec![gaussian(&[5, 6], 1.0, 31), gaussian(&[4, 6], 1.0, 32)])
}

/// Desk-scale encoder used for the end-to-end runs.
pub const ACCEPTANCE_ENCODER: &str = "[encoder]\nd_model = 32\nn_layers = 2\nn_heads = 4\nff_dim = 64\nmax_len = 32\n";

/// Run config over the split files `synth` writes into `data`.
pub fn run_config(data: &Path, variant: &str, extra_train: &str) -> String {
    let lora = if matches!(variant, "proto-lora" | "lora-ft" | "post-hoc-proto") {
        "[lora]\nrank = 8\nalpha = 16.0\n"
    } else {
        ""
    };
    format!(
        "[paths]\ntrain = {:?}\nvalidation = {:?}\nprototype = {:?}\ntest = {:?}\n\n{ACCEPTANCE_ENCODER}\n[train]\nvariant = \"{variant}\"\n{extra_train}\n{lora}",
        data.join("train.jsonl"),
        data.join("validation.jsonl"),
        data.join("prototype.jsonl"),
        data.join("test.jsonl"),
    )
}

/// Runs the CLI in-process, returning exit code, stdout and stderr.
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("protolora").chain(args.iter().copied());
    let code = protolora::cli::main_with_args(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
