use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_episode, AdamW, EarlyStopping, Episode, ReduceOnPlateau};
use crate::corpus::{labels_of, Label, StudyRecord};
use crate::encoder::{Encoder, EncoderConfig, Mode, Pooling};
use crate::error::{Error, Result};
use crate::eval::{confusion, EvalReport};
use crate::lora::LoraConfig;
use crate::model::{embed_sequences, tokenize_all, Checkpoint, Variant};
use crate::proto::{episode_loss, DistanceMetric, LinearHead, Prototypes, TapePrototypes};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Vocabulary};

const EPISODE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_support: usize,
    pub n_query: usize,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub metric: DistanceMetric,
    pub pooling: Pooling,
    /// Adapter settings; `None` trains (or freezes) every encoder weight.
    /// Read from its own `[lora]` section in run configs.
    #[serde(skip)]
    pub lora: Option<LoraConfig>,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6e-4,
            weight_decay: 0.01,
            n_support: 5,
            n_query: 5,
            episodes_per_epoch: 10,
            max_epochs: 101,
            early_stop_patience: 8,
            scheduler_factor: 0.5,
            scheduler_patience: 3,
            metric: DistanceMetric::Euclidean,
            pooling: Pooling::Cls,
            lora: Some(LoraConfig::default()),
            seed: 0,
            variant: Variant::ProtoLora,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.n_support == 0 || self.n_query == 0 || self.episodes_per_epoch == 0 {
            return bad("n_support, n_query and episodes_per_epoch must be positive".into());
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad(format!("scheduler_factor must lie in (0, 1], got {}", self.scheduler_factor));
        }
        match self.variant {
            Variant::ProtoLora | Variant::LoraFt if self.lora.is_none() => {
                bad(format!("variant {:?} needs a [lora] section", self.variant))
            }
            Variant::ProtoNoLora | Variant::FullFt | Variant::FrozenProto if self.lora.is_some() => bad(format!(
                "variant {:?} trains without adapters; remove the [lora] section",
                self.variant
            )),
            _ => Ok(()),
        }
    }
}

/// Labeled splits consumed by [`train`].
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [StudyRecord],
    pub validation: &'a [StudyRecord],
    pub prototype: &'a [StudyRecord],
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub validation_f1: f64,
    pub learning_rate: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Every episode or minibatch drawn, in order.
    pub episodes: Vec<Episode>,
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log serializes") + "\n")
        .collect()
}

struct Prepared {
    train: Vec<TokenSequence>,
    validation: Vec<TokenSequence>,
    validation_labels: Vec<Label>,
    prototype: Vec<TokenSequence>,
    prototype_labels: Vec<Label>,
}

/// Trains `config.variant` and returns the checkpoint with the best
/// validation F1 together with the per-epoch log.
pub fn train(config: &TrainConfig, encoder: &EncoderConfig, vocab: &Vocabulary, splits: Splits<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    for (name, set) in [("train", splits.train), ("validation", splits.validation), ("prototype", splits.prototype)] {
        if set.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
    }
    let mut enc_cfg = encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    enc_cfg.pooling = config.pooling;
    let lora = match config.variant {
        Variant::FrozenProto => None,
        _ => config.lora.clone(),
    };
    let mut enc = Encoder::new(enc_cfg, lora, config.seed)?;
    if config.variant == Variant::FrozenProto {
        enc.freeze_all();
    }
    let head = config
        .variant
        .has_head()
        .then(|| LinearHead::zeros(enc.d_model()));
    let initial = Checkpoint {
        variant: config.variant,
        metric: config.metric,
        encoder: enc,
        vocab: vocab.clone(),
        head,
        seed: config.seed,
        epoch: 0,
        validation_f1: None,
    };

    let max_len = initial.encoder.config().max_len;
    let prep = Prepared {
        train: tokenize_all(splits.train, vocab, max_len)?,
        validation: tokenize_all(splits.validation, vocab, max_len)?,
        validation_labels: labels_of(splits.validation)?,
        prototype: tokenize_all(splits.prototype, vocab, max_len)?,
        prototype_labels: labels_of(splits.prototype)?,
    };
    labels_of(splits.train)?;

    if config.variant == Variant::FrozenProto || config.max_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: initial,
            log: Vec::new(),
            episodes: Vec::new(),
        });
    }

    let mut model = initial;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(config.seed);
    episode_rng.set_stream(EPISODE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut optimizer = AdamW::new();
    let mut scheduler = ReduceOnPlateau::new(config.learning_rate, config.scheduler_factor, config.scheduler_patience);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut episodes = Vec::new();

    for epoch in 1..=config.max_epochs {
        let lr = scheduler.learning_rate();
        let mut loss_sum = 0.0;
        for _ in 0..config.episodes_per_epoch {
            let episode = sample_episode(splits.train, config.n_support, config.n_query, &mut episode_rng)?;
            loss_sum += train_step(&mut model, &mut optimizer, &episode, splits.train, &prep.train, config, lr, &mut dropout_rng)?;
            episodes.push(episode);
        }
        let f1 = validation_f1(&model, &prep)?;
        if stopper.update(f1) {
            let mut snapshot = model.clone();
            snapshot.epoch = epoch;
            snapshot.validation_f1 = Some(f1);
            best = Some(snapshot);
        }
        scheduler.step(f1);
        let stop = stopper.should_stop();
        log.push(EpochLog {
            epoch,
            loss: loss_sum / config.episodes_per_epoch as f64,
            validation_f1: f1,
            learning_rate: lr,
            stopped_early: stop,
        });
        if stop {
            break;
        }
    }

    let mut checkpoint = best.expect("at least one epoch ran");
    for (_, t) in checkpoint.encoder.params_mut().iter_mut() {
        t.set_grad(None);
    }
    if let Some(h) = checkpoint.head.as_mut() {
        h.weight.set_grad(None);
        h.bias.set_grad(None);
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        episodes,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Checkpoint,
    optimizer: &mut AdamW,
    episode: &Episode,
    train: &[StudyRecord],
    seqs: &[TokenSequence],
    config: &TrainConfig,
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch: Vec<TokenSequence> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|&i| seqs[i].clone())
        .collect();
    let support_labels = episode.support_labels(train)?;
    let query_labels = episode.query_labels(train)?;

    let mut tape = Tape::new();
    let vars = model.encoder.params().bind(&mut tape);
    let emb = model.encoder.forward(&mut tape, &vars, &batch, Mode::Train(dropout_rng))?;
    let head_vars = model.head.as_ref().map(|h| (tape.leaf(&h.weight), tape.leaf(&h.bias)));
    let loss = if config.variant.trains_prototypically() {
        let n_s = support_labels.len();
        let support = tape.slice_rows(emb, 0, n_s)?;
        let query = tape.slice_rows(emb, n_s, query_labels.len())?;
        let protos = TapePrototypes::from_support(&mut tape, support, &support_labels)?;
        episode_loss(&mut tape, query, &query_labels, &protos, config.metric)?
    } else {
        let (w, b) = head_vars.expect("parametric variants carry a head");
        let logits = LinearHead::tape_logits(&mut tape, emb, w, b)?;
        let targets: Vec<usize> = support_labels.iter().chain(&query_labels).map(|l| l.index()).collect();
        tape.cross_entropy(logits, &targets)?
    };
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    model.encoder.params_mut().collect_grads(&tape, &vars);
    let mut head_params: Vec<(&str, &mut Tensor)> = Vec::new();
    if let (Some(h), Some((w, b))) = (model.head.as_mut(), head_vars) {
        h.weight.set_grad(Some(tape.grad_or_zero(w)));
        h.bias.set_grad(Some(tape.grad_or_zero(b)));
        head_params.push(("head.weight", &mut h.weight));
        head_params.push(("head.bias", &mut h.bias));
    }
    optimizer.step(
        model.encoder.params_mut().iter_mut().chain(head_params),
        lr,
        config.weight_decay,
    )?;
    Ok(value)
}

/// Validation F1 under the rule used for checkpoint selection: prototypes
/// from the prototype set for prototype-trained variants, the head otherwise.
fn validation_f1(model: &Checkpoint, prep: &Prepared) -> Result<f64> {
    let embeddings = embed_sequences(&model.encoder, &prep.validation)?;
    let (n, _) = embeddings.dims2()?;
    let predicted: Vec<Label> = if model.variant.trains_prototypically() {
        let protos = Prototypes::from_embeddings(&embed_sequences(&model.encoder, &prep.prototype)?, &prep.prototype_labels)?;
        (0..n)
            .map(|i| crate::proto::classify(embeddings.row(i), &protos, model.metric))
            .collect::<Result<_>>()?
    } else {
        let head = model.head.as_ref().expect("parametric variants carry a head");
        (0..n).map(|i| head.classify(embeddings.row(i))).collect::<Result<_>>()?
    };
    let report: EvalReport = confusion(&predicted, &prep.validation_labels)?;
    Ok(report.f1)
}
