//! Trained models, their checkpoint container and the embedding/scoring
//! helpers shared by training, evaluation and triage.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, StudyRecord};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::proto::{class_probabilities, classify, DistanceMetric, LinearHead, Prototypes};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_record, TokenSequence, Vocabulary};

const FORMAT: &str = "protolora-checkpoint";
const VERSION: u32 = 1;
const EMBED_CHUNK: usize = 32;

/// Training objective and inference rule of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Episodic prototype loss through low-rank adapters.
    ProtoLora,
    /// Episodic prototype loss updating every encoder weight.
    ProtoNoLora,
    /// Linear head trained with adapters.
    LoraFt,
    /// Linear head trained with every encoder weight.
    FullFt,
    /// No training; prototypes from the initial encoder.
    FrozenProto,
    /// Trained like `LoraFt` (or `FullFt` without adapters), classified by prototypes.
    PostHocProto,
}

impl Variant {
    /// Whether inference compares embeddings against prototypes.
    pub fn classifies_by_prototype(self) -> bool {
        !matches!(self, Variant::LoraFt | Variant::FullFt)
    }

    /// Whether training optimizes the episodic prototype loss.
    pub fn trains_prototypically(self) -> bool {
        matches!(self, Variant::ProtoLora | Variant::ProtoNoLora)
    }

    pub fn has_head(self) -> bool {
        matches!(self, Variant::LoraFt | Variant::FullFt | Variant::PostHocProto)
    }
}

/// Everything needed to reproduce a model's eval-mode outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub metric: DistanceMetric,
    pub encoder: Encoder,
    pub vocab: Vocabulary,
    pub head: Option<LinearHead>,
    pub seed: u64,
    /// Epoch the weights come from (0 = initialization).
    pub epoch: usize,
    pub validation_f1: Option<f64>,
}

/// How embeddings are turned into class probabilities.
#[derive(Clone, Debug)]
pub enum Scorer {
    Prototype { prototypes: Prototypes, metric: DistanceMetric },
    Head(LinearHead),
}

impl Scorer {
    /// `(p_pos, p_neg)` for one embedding.
    pub fn probabilities(&self, h: &[f64]) -> Result<(f64, f64)> {
        match self {
            Scorer::Prototype { prototypes, metric } => class_probabilities(h, prototypes, *metric),
            Scorer::Head(head) => head.probabilities(h),
        }
    }

    pub fn classify(&self, h: &[f64]) -> Result<Label> {
        match self {
            Scorer::Prototype { prototypes, metric } => classify(h, prototypes, *metric),
            Scorer::Head(head) => head.classify(h),
        }
    }

    pub fn classify_all(&self, embeddings: &Tensor) -> Result<Vec<Label>> {
        let (n, _) = embeddings.dims2()?;
        (0..n).map(|i| self.classify(embeddings.row(i))).collect()
    }
}

/// Tokenizes records to the encoder's fixed length.
pub fn tokenize_all(records: &[StudyRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    records.iter().map(|r| tokenize_record(r, vocab, max_len)).collect()
}

/// Eval-mode embeddings `[n × d]`, encoded in fixed-size chunks in input order.
pub fn embed_sequences(encoder: &Encoder, seqs: &[TokenSequence]) -> Result<Tensor> {
    let d = encoder.d_model();
    let mut data = Vec::with_capacity(seqs.len() * d);
    for chunk in seqs.chunks(EMBED_CHUNK) {
        data.extend_from_slice(encoder.encode(chunk)?.data());
    }
    Tensor::new(vec![seqs.len(), d], data)
}

impl Checkpoint {
    pub fn embed(&self, records: &[StudyRecord]) -> Result<Tensor> {
        let seqs = tokenize_all(records, &self.vocab, self.encoder.config().max_len)?;
        embed_sequences(&self.encoder, &seqs)
    }

    /// Prototypes from a labeled prototype set under this model's encoder.
    pub fn prototypes(&self, prototype_set: &[StudyRecord]) -> Result<Prototypes> {
        let labels = crate::corpus::labels_of(prototype_set)?;
        Prototypes::from_embeddings(&self.embed(prototype_set)?, &labels)
    }

    /// The scoring rule for this variant. Prototype variants need a prototype set.
    pub fn scorer(&self, prototype_set: Option<&[StudyRecord]>) -> Result<Scorer> {
        if self.variant.classifies_by_prototype() {
            let set = prototype_set.ok_or_else(|| {
                Error::Config(format!("variant {:?} needs a prototype set", self.variant))
            })?;
            Ok(Scorer::Prototype {
                prototypes: self.prototypes(set)?,
                metric: self.metric,
            })
        } else {
            let head = self
                .head
                .clone()
                .ok_or_else(|| Error::Data("checkpoint of a parametric variant has no head".into()))?;
            Ok(Scorer::Head(head))
        }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            variant: self.variant,
            metric: self.metric,
            seed: self.seed,
            epoch: self.epoch,
            validation_f1: self.validation_f1,
            encoder: self.encoder.config().clone(),
            lora: self.encoder.lora_config().cloned(),
            vocabulary: self.vocab.clone(),
            tensors: self.encoder.params().iter().map(|(n, t)| TensorRecord::from_tensor(n, t)).collect(),
            head: self.head.as_ref().map(|h| {
                vec![
                    TensorRecord::from_tensor("head.weight", &h.weight),
                    TensorRecord::from_tensor("head.bias", &h.bias),
                ]
            }),
        };
        let mut s = serde_json::to_string(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {} v{}",
                file.format, file.version
            )));
        }
        if file.vocabulary.len() != file.encoder.vocab_size {
            return Err(Error::Data(format!(
                "checkpoint vocabulary has {} tokens but the encoder expects {}",
                file.vocabulary.len(),
                file.encoder.vocab_size
            )));
        }
        let tensors = file
            .tensors
            .into_iter()
            .map(|r| Ok((r.name.clone(), r.into_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        let encoder = Encoder::from_parts(file.encoder, file.lora, tensors, file.seed)?;
        let head = match file.head {
            None => None,
            Some(records) => {
                let mut it = records.into_iter();
                let (Some(w), Some(b), None) = (it.next(), it.next(), it.next()) else {
                    return Err(Error::Data("checkpoint head must hold a weight and a bias".into()));
                };
                let head = LinearHead {
                    weight: w.into_tensor()?,
                    bias: b.into_tensor()?,
                };
                if head.weight.shape() != [encoder.d_model(), 2] || head.bias.shape() != [2] {
                    return Err(Error::Data("checkpoint head shape does not match the encoder".into()));
                }
                Some(head)
            }
        };
        Ok(Checkpoint {
            variant: file.variant,
            metric: file.metric,
            encoder,
            vocab: file.vocabulary,
            head,
            seed: file.seed,
            epoch: file.epoch,
            validation_f1: file.validation_f1,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    variant: Variant,
    metric: DistanceMetric,
    seed: u64,
    epoch: usize,
    validation_f1: Option<f64>,
    encoder: EncoderConfig,
    lora: Option<LoraConfig>,
    vocabulary: Vocabulary,
    tensors: Vec<TensorRecord>,
    head: Option<Vec<TensorRecord>>,
}

/// A tensor stored as base64 of its little-endian `f64` bytes, which
/// round-trips every value bit for bit.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    data: String,
}

impl TensorRecord {
    fn from_tensor(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorRecord {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
            data: B64.encode(bytes),
        }
    }

    fn into_tensor(self) -> Result<Tensor> {
        let bytes = B64
            .decode(self.data.as_bytes())
            .map_err(|e| Error::Data(format!("tensor `{}`: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Data(format!("tensor `{}` has a truncated payload", self.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Tensor::new(self.shape, data)?.with_requires_grad(self.trainable))
    }
}
