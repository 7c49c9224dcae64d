//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any fails.
//!
//! cargo test --release --test acceptance

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use protolora::corpus::Label;
use protolora::encoder::{Encoder, EncoderConfig, Pooling};
use protolora::eval::{confusion, evaluate_variant, EvalReport};
use protolora::gradcheck::finite_difference_check;
use protolora::lora::{LoraConfig, LoraTarget};
use protolora::model::Variant;
use protolora::proto::{class_probabilities, classify, compute_prototype, DistanceMetric, Prototypes};
use protolora::synth::synth_corpus;
use protolora::tensor::Tensor;
use protolora::tokenizer::build_vocab;
use protolora::train::{train, EarlyStopping, ReduceOnPlateau, Splits, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed <= limit,
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 metric-formula fidelity", metric_fidelity),
        ("2 gradient suite", gradient_suite),
        ("3 adapter structure", adapter_structure),
        ("4 prototype invariants", prototype_invariants),
        ("5 protocol fidelity", protocol_fidelity),
        ("6 end-to-end synthetic reproduction", synthetic_reproduction),
        ("7 determinism", determinism),
        ("8 triage workflow", triage_workflow),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn metric_fidelity() -> Outcome {
    let start = Instant::now();
    // Counts against a 71 positive / 765 negative test split.
    let (tp, fp, fn_, tn) = (63, 68, 8, 697);
    let mut truth = vec![Label::Positive; tp + fn_];
    truth.extend(vec![Label::Negative; fp + tn]);
    let mut predicted = vec![Label::Positive; tp];
    predicted.extend(vec![Label::Negative; fn_]);
    predicted.extend(vec![Label::Positive; fp]);
    predicted.extend(vec![Label::Negative; tn]);
    let report = confusion(&predicted, &truth).map_err(|e| e.to_string())?;
    check(report == EvalReport::from_counts(tp, fp, fn_, tn), "confusion disagrees with from_counts")?;
    check((report.tp + report.fn_, report.fp + report.tn) == (71, 765), "split sizes")?;
    let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
    let got = [report.accuracy, report.precision, report.recall, report.f1].map(round3);
    check(got == [0.909, 0.481, 0.887, 0.624], format!("rounded metrics {got:?}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("acc/prec/rec/f1 = {got:?}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut record = |name: String, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
    };
    let cases = op_cases();
    let n_ops = cases.len();
    for (name, loss, inputs) in cases {
        record(name.to_string(), finite_difference_check(loss, &inputs, FD_STEP).map_err(|e| e.to_string())?);
    }
    for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
        let (loss, params) = lora_path_case(metric);
        record(format!("adapter path ({metric:?})"), finite_difference_check(loss, &params, FD_STEP).map_err(|e| e.to_string())?);
        let (loss, params) = embedding_loss_case(metric);
        record(format!("episode loss ({metric:?})"), finite_difference_check(loss, &params, FD_STEP).map_err(|e| e.to_string())?);
    }
    check(worst.0 <= FD_TOL, format!("{}: relative error {:e} > {FD_TOL:e}", worst.1, worst.0))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{n_ops} ops + adapter path + episode loss; worst {:e} ({})", worst.0, worst.1))
}

fn adapter_structure() -> Outcome {
    let e = |r: protolora::Result<Encoder>| r.map_err(|e| e.to_string());
    let records = toy_records();
    let vocab = build_vocab(&records, 1).map_err(|e| e.to_string())?;
    let batch = sequences(&records, &vocab, 10);

    // Zero-initialized B leaves the base function unchanged.
    let base = tiny_encoder(&vocab, None, Pooling::Cls);
    let adapted = tiny_encoder(&vocab, Some(LoraConfig::with_rank(4)), Pooling::Cls);
    let diff = base.encode(&batch).unwrap().max_abs_diff(&adapted.encode(&batch).unwrap());
    check(diff <= 1e-12, format!("zero-init deviation {diff:e}"))?;

    // Frozen base after 50 optimizer steps.
    let corpus = synth_corpus(5, 40, 60, 0.8).map_err(|e| e.to_string())?;
    let vocab2 = build_vocab(&corpus.train, 1).map_err(|e| e.to_string())?;
    let enc_cfg = EncoderConfig { d_model: 16, n_layers: 2, n_heads: 2, ff_dim: 32, vocab_size: vocab2.len(), max_len: 32, pooling: Pooling::Cls };
    let config = TrainConfig {
        lora: Some(LoraConfig::with_rank(4)),
        max_epochs: 5,
        early_stop_patience: 100,
        learning_rate: 1e-2,
        seed: 5,
        ..TrainConfig::default()
    };
    let splits = Splits { train: &corpus.train, validation: &corpus.validation, prototype: &corpus.prototype };
    let outcome = train(&config, &enc_cfg, &vocab2, splits).map_err(|e| e.to_string())?;
    check(outcome.episodes.len() == 50, format!("{} steps", outcome.episodes.len()))?;
    let fresh = e(Encoder::new(enc_cfg.clone(), config.lora.clone(), 5))?;
    let mut adapters_moved = false;
    for ((name, trained), (_, init)) in outcome.checkpoint.encoder.params().iter().zip(fresh.params().iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if name.contains(".lora_") {
            adapters_moved |= bits(trained) != bits(init);
        } else if !name.starts_with("output.norm") {
            check(bits(trained) == bits(init), format!("base weight {name} changed"))?;
        }
    }
    check(adapters_moved, "adapters never moved")?;

    // Parameter counts.
    for (d, r, per_adapter, heads) in [(128, 4, 1024, 4), (768, 32, 49152, 12)] {
        let cfg = EncoderConfig { d_model: d, n_layers: 2, n_heads: heads, ff_dim: 4, vocab_size: 8, max_len: 4, pooling: Pooling::Cls };
        let enc = e(Encoder::new(cfg, Some(LoraConfig::with_rank(r)), 0))?;
        for layer in 0..2 {
            for target in [LoraTarget::Query, LoraTarget::Value] {
                let n = enc.adapter(layer, target).map(|a| a.trainable_parameters());
                check(n == Some(per_adapter), format!("d={d} r={r}: adapter holds {n:?}"))?;
            }
        }
        check(enc.lora_parameter_count() == 2 * 2 * per_adapter, format!("d={d} r={r}: total {}", enc.lora_parameter_count()))?;
    }

    // Merged weights reproduce the adapter path.
    let merged = outcome.checkpoint.encoder.merged();
    let seqs = sequences(&corpus.test[..16], &vocab2, 32);
    let gap = outcome.checkpoint.encoder.encode(&seqs).unwrap().max_abs_diff(&merged.encode(&seqs).unwrap());
    check(gap <= 1e-9, format!("merged vs adapter gap {gap:e}"))?;
    Ok(format!("zero-init {diff:e}, merged gap {gap:e}, counts 1024/49152 per adapter"))
}

fn prototype_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let d = 16;
    let vec = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(-scale..scale)).collect() };

    // Permutation invariance, bit for bit.
    for _ in 0..50 {
        let n = rng.random_range(1..12);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec(&mut rng, 10.0)).collect();
        let base = compute_prototype(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let other = compute_prototype(&Tensor::from_rows(&shuffled).unwrap()).unwrap();
        check(
            base.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "prototype changed under permutation",
        )?;
    }

    let oracle = |h: &[f64], p: &[f64], n: &[f64], metric: DistanceMetric| -> Label {
        let dist = |a: &[f64], b: &[f64]| match metric {
            DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            DistanceMetric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            }
        };
        if dist(h, p) < dist(h, n) {
            Label::Positive
        } else {
            Label::Negative
        }
    };
    let mut worst_sum: f64 = 0.0;
    let mut mismatches = 0;
    for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
        for _ in 0..1000 {
            let (h, p, n) = (vec(&mut rng, 3.0), vec(&mut rng, 3.0), vec(&mut rng, 3.0));
            let protos = Prototypes::from_embeddings(&Tensor::from_rows(&[p.clone(), n.clone()]).unwrap(), &[Label::Positive, Label::Negative]).unwrap();
            let (pp, pn) = class_probabilities(&h, &protos, metric).unwrap();
            worst_sum = worst_sum.max((pp + pn - 1.0).abs());
            let label = classify(&h, &protos, metric).unwrap();
            if label != oracle(&h, &p, &n, metric) {
                mismatches += 1;
            }
            match metric {
                DistanceMetric::Euclidean => {
                    let t = vec(&mut rng, 5.0);
                    let shift = |v: &[f64]| v.iter().zip(&t).map(|(a, b)| a + b).collect::<Vec<_>>();
                    let moved = Prototypes::from_embeddings(&Tensor::from_rows(&[shift(&p), shift(&n)]).unwrap(), &[Label::Positive, Label::Negative]).unwrap();
                    check(classify(&shift(&h), &moved, metric).unwrap() == label, "translation changed the class")?;
                }
                DistanceMetric::Cosine => {
                    let c = rng.random_range(0.01..100.0);
                    let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
                    check(classify(&scaled, &protos, metric).unwrap() == label, "scaling changed the class")?;
                }
            }
        }
    }
    check(worst_sum <= 1e-9, format!("probabilities off by {worst_sum:e}"))?;
    check(mismatches == 0, format!("{mismatches} disagreements with the nearest-prototype oracle"))?;
    Ok(format!("2000 oracle triples agree; max |p_pos + p_neg - 1| = {worst_sum:e}"))
}

fn protocol_fidelity() -> Outcome {
    // A full 101-epoch run with early stopping disabled, every episode checked.
    let corpus = synth_corpus(11, 40, 60, 0.8).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&corpus.train, 1).map_err(|e| e.to_string())?;
    let enc_cfg = EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, ff_dim: 8, vocab_size: vocab.len(), max_len: 32, pooling: Pooling::Cls };
    let config = TrainConfig {
        lora: Some(LoraConfig::with_rank(2)),
        max_epochs: 101,
        early_stop_patience: usize::MAX,
        seed: 11,
        ..TrainConfig::default()
    };
    let splits = Splits { train: &corpus.train, validation: &corpus.validation, prototype: &corpus.prototype };
    let outcome = train(&config, &enc_cfg, &vocab, splits).map_err(|e| e.to_string())?;
    check(outcome.log.len() == 101, format!("{} epochs logged", outcome.log.len()))?;
    check(outcome.episodes.len() == 1010, format!("{} episodes", outcome.episodes.len()))?;
    for (i, ep) in outcome.episodes.iter().enumerate() {
        ep.check(&corpus.train, 5, 5).map_err(|e| format!("episode {i}: {e}"))?;
    }

    // Early stopping on constructed traces halts `patience` epochs after the
    // last strict improvement.
    let traces: [(&str, Vec<f64>); 4] = [
        ("flat after 3", [0.2, 0.4, 0.6].into_iter().chain(std::iter::repeat_n(0.6, 40)).collect()),
        ("late gain", [0.1, 0.5, 0.5, 0.5, 0.5, 0.5, 0.7].into_iter().chain(std::iter::repeat_n(0.3, 40)).collect()),
        ("ties only", vec![0.5; 40]),
        ("noisy", [0.3, 0.2, 0.35, 0.35, 0.1, 0.36, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2].to_vec()),
    ];
    for (name, trace) in &traces {
        let mut es = EarlyStopping::new(8);
        let mut best = f64::NEG_INFINITY;
        let mut last_gain = 0;
        let mut stopped = None;
        for (i, &f) in trace.iter().enumerate() {
            let epoch = i + 1;
            if f > best {
                best = f;
                last_gain = epoch;
            }
            es.update(f);
            if es.should_stop() {
                stopped = Some(epoch);
                break;
            }
        }
        check(stopped == Some(last_gain + 8), format!("trace {name}: stopped at {stopped:?}, last gain {last_gain}"))?;
    }

    // Reduce-on-plateau halves once after `patience` flat epochs.
    let mut sched = ReduceOnPlateau::new(6e-4, 0.5, 3);
    let lrs: Vec<f64> = (0..4).map(|_| sched.step(0.5)).collect();
    check(lrs == [6e-4, 6e-4, 6e-4, 3e-4], format!("flat-trace rates {lrs:?}"))?;
    Ok("1010 balanced disjoint episodes; stop epochs and halving as specified".into())
}

fn acceptance_encoder(vocab_len: usize) -> EncoderConfig {
    EncoderConfig { d_model: 32, n_layers: 2, n_heads: 4, ff_dim: 64, vocab_size: vocab_len, max_len: 32, pooling: Pooling::Cls }
}

fn synthetic_reproduction() -> Outcome {
    let start = Instant::now();
    let f1 = |variant: Variant, seed: u64| -> Result<f64, String> {
        let corpus = synth_corpus(seed, 121, 995, 0.8).map_err(|e| e.to_string())?;
        let vocab = build_vocab(&[corpus.train.clone(), corpus.prototype.clone(), corpus.validation.clone()].concat(), 1)
            .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            lora: (variant != Variant::FrozenProto).then(|| LoraConfig::with_rank(8)),
            seed,
            variant,
            ..TrainConfig::default()
        };
        let splits = Splits { train: &corpus.train, validation: &corpus.validation, prototype: &corpus.prototype };
        let outcome = train(&config, &acceptance_encoder(vocab.len()), &vocab, splits).map_err(|e| e.to_string())?;
        check(outcome.log.len() <= 101, "more than 101 epochs")?;
        let report = evaluate_variant(&outcome.checkpoint, Some(&corpus.prototype), &corpus.test, None).map_err(|e| e.to_string())?;
        check(report.tp + report.fn_ == 71 && report.fp + report.tn == 765, "test split shape")?;
        Ok(report.f1)
    };
    let seeds = [0u64, 1, 2, 3, 4];
    let mut scores = Vec::new();
    for variant in [Variant::ProtoLora, Variant::LoraFt, Variant::FrozenProto] {
        let s = seeds.iter().map(|&seed| f1(variant, seed)).collect::<Result<Vec<_>, _>>()?;
        scores.push(s);
    }
    let fmt = |s: &[f64]| s.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(",");
    let [proto, lora_ft, frozen] = [median(scores[0].clone()), median(scores[1].clone()), median(scores[2].clone())];
    let detail = format!(
        "median F1 ProtoLora {proto:.3} [{}], LoraFT {lora_ft:.3} [{}], FrozenProto {frozen:.3} [{}]",
        fmt(&scores[0]),
        fmt(&scores[1]),
        fmt(&scores[2])
    );
    check(proto >= 0.90, format!("ProtoLora below 0.90; {detail}"))?;
    check(proto >= lora_ft, format!("ProtoLora below LoraFT; {detail}"))?;
    check(proto >= frozen, format!("ProtoLora below FrozenProto; {detail}"))?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(detail)
}

fn run_pipeline(dir: &Path) -> Result<[Vec<u8>; 3], String> {
    let data = dir.join("data");
    let model = dir.join("model");
    let cfg = dir.join("run.toml");
    let ok = |(code, _, err): (i32, String, String)| check(code == 0, format!("exit {code}: {err}"));
    ok(cli(&["synth", "--seed", "7", "--out", data.to_str().unwrap()]))?;
    fs::write(&cfg, run_config(&data, "proto-lora", "seed = 7")).map_err(|e| e.to_string())?;
    ok(cli(&["train", "--config", cfg.to_str().unwrap(), "--out", model.to_str().unwrap()]))?;
    let report = dir.join("report.json");
    ok(cli(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        model.join("checkpoint.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]))?;
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok([read(&model.join("train_log.jsonl"))?, read(&model.join("checkpoint.json"))?, read(&report)?])
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_pipeline(a.path())?;
    let second = run_pipeline(b.path())?;
    for (name, (x, y)) in ["log", "checkpoint", "report"].iter().zip(first.iter().zip(&second)) {
        check(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!("log, checkpoint ({} bytes) and report byte-identical", first[1].len()))
}

fn triage_workflow() -> Outcome {
    let start = Instant::now();
    let mut fractions = Vec::new();
    let mut top_decile = Vec::new();
    for seed in [0u64, 1, 2] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = dir.path().join("data");
        let model = dir.path().join("model");
        let cfg = dir.path().join("run.toml");
        let preds = dir.path().join("predictions.jsonl");
        let s = seed.to_string();
        let ok = |(code, _, err): (i32, String, String)| check(code == 0, format!("exit {code}: {err}"));
        ok(cli(&["synth", "--seed", &s, "--unlabeled", "10000", "--positive-rate", "0.01", "--out", data.to_str().unwrap()]))?;
        fs::write(&cfg, run_config(&data, "proto-lora", &format!("seed = {seed}"))).map_err(|e| e.to_string())?;
        ok(cli(&["train", "--config", cfg.to_str().unwrap(), "--out", model.to_str().unwrap()]))?;
        ok(cli(&[
            "predict",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            model.join("checkpoint.json").to_str().unwrap(),
            "--input",
            data.join("unlabeled.jsonl").to_str().unwrap(),
            "--out",
            preds.to_str().unwrap(),
        ]))?;

        let text = fs::read_to_string(&preds).map_err(|e| e.to_string())?;
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let (summary, rows) = lines.split_last().ok_or("empty predictions")?;
        check(rows.len() == 10_000, format!("{} prediction rows", rows.len()))?;
        fractions.push(summary["summary"]["flagged_fraction"].as_f64().ok_or("summary missing")?);
        let truth = fs::read_to_string(data.join("unlabeled_truth.jsonl")).map_err(|e| e.to_string())?;
        let planted: HashSet<String> = truth
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .filter(|v| v["label"] == "positive")
            .map(|v| v["id"].as_str().unwrap().to_owned())
            .collect();
        check(planted.len() == 100, format!("{} planted positives", planted.len()))?;
        let found = rows[..1000].iter().filter(|r| planted.contains(r["id"].as_str().unwrap())).count();
        top_decile.push(found as f64 / planted.len() as f64);
    }
    let frac = median(fractions.clone());
    let recall = median(top_decile.clone());
    let detail = format!("median flagged {:.2}% {:?}, median planted-in-top-decile {recall:.2} {top_decile:?}", 100.0 * frac, fractions);
    check((0.005..=0.03).contains(&frac), format!("flagged fraction out of range; {detail}"))?;
    check(recall == 1.0, format!("planted positives outside the top decile; {detail}"))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(detail)
}
