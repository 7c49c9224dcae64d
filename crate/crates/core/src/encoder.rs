//! Miniature transformer encoder with optional low-rank adapters on the
//! attention query and value projections.
//!
//! Post-norm blocks (`x = LN(x + Attn(x))`, `x = LN(x + FF(x))`) with learned
//! absolute positions, followed by a separate output layer norm. With
//! adapters enabled only `A`, `B` and the output norm are trainable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{lora_delta, LoraAdapter, LoraConfig, LoraTarget};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;
const LORA_STREAM: u64 = 0x10ad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 256,
            vocab_size: 0,
            max_len: 128,
            pooling: Pooling::Cls,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if self.max_len < 2 {
            return Err(Error::Config("encoder max_len must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors, kept in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Records every parameter as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Records every parameter as a constant (no gradients anywhere).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Copies gradients from a finished tape into the trainable tensors.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if t.requires_grad {
                t.grad = Some(tape.grad_or_zero(*v));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Adapter {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    query_lora: Option<Adapter>,
    value_lora: Option<Adapter>,
    attn_norm: Norm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: Norm,
}

/// Whether dropout is active; training mode carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    lora: Option<LoraConfig>,
    params: ParamStore,
    token_emb: ParamId,
    pos_emb: ParamId,
    emb_norm: Norm,
    layers: Vec<Layer>,
    output_norm: Norm,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

impl Encoder {
    /// Seeded initialization: base weights and adapter `A` drawn from
    /// `N(0, 0.02²)` on separate streams, adapter `B` zero, biases zero and
    /// norms at identity.
    pub fn new(config: EncoderConfig, lora: Option<LoraConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(l) = &lora {
            l.validate(config.d_model)?;
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut base = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let mut adapter_rng = ChaCha8Rng::seed_from_u64(seed);
        adapter_rng.set_stream(LORA_STREAM);
        let mut adapter_init = Init { rng: adapter_rng, normal };

        let d = config.d_model;
        let mut params = ParamStore::default();
        let linear = |params: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize| Linear {
            weight: params.add(format!("{name}.weight"), init.gaussian(&[d_in, d_out])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        };
        let norm = |params: &mut ParamStore, name: &str| Norm {
            gamma: params.add(format!("{name}.gamma"), Tensor::vector(vec![1.0; d])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        };

        let token_emb = params.add("embeddings.token".into(), base.gaussian(&[config.vocab_size, d]));
        let pos_emb = params.add("embeddings.position".into(), base.gaussian(&[config.max_len, d]));
        let emb_norm = norm(&mut params, "embeddings.norm");
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            layers.push(Layer {
                query: linear(&mut params, &mut base, &format!("{p}.attention.query"), d, d),
                key: linear(&mut params, &mut base, &format!("{p}.attention.key"), d, d),
                value: linear(&mut params, &mut base, &format!("{p}.attention.value"), d, d),
                output: linear(&mut params, &mut base, &format!("{p}.attention.output"), d, d),
                query_lora: None,
                value_lora: None,
                attn_norm: norm(&mut params, &format!("{p}.attention.norm")),
                ff_in: linear(&mut params, &mut base, &format!("{p}.ff.in"), d, config.ff_dim),
                ff_out: linear(&mut params, &mut base, &format!("{p}.ff.out"), config.ff_dim, d),
                ff_norm: norm(&mut params, &format!("{p}.ff.norm")),
            });
        }
        let output_norm = norm(&mut params, "output.norm");

        if let Some(cfg) = &lora {
            for (l, layer) in layers.iter_mut().enumerate() {
                for target in [LoraTarget::Query, LoraTarget::Value] {
                    if !cfg.targets(target) {
                        continue;
                    }
                    let tag = match target {
                        LoraTarget::Query => "query",
                        LoraTarget::Value => "value",
                    };
                    let a = params.add(
                        format!("layers.{l}.attention.{tag}.lora_a"),
                        adapter_init.gaussian(&[d, cfg.rank]),
                    );
                    let b = params.add(format!("layers.{l}.attention.{tag}.lora_b"), Tensor::zeros(&[cfg.rank, d]));
                    let slot = match target {
                        LoraTarget::Query => &mut layer.query_lora,
                        LoraTarget::Value => &mut layer.value_lora,
                    };
                    *slot = Some(Adapter { a, b });
                }
            }
        }

        let mut enc = Encoder {
            config,
            lora,
            params,
            token_emb,
            pos_emb,
            emb_norm,
            layers,
            output_norm,
        };
        enc.reset_trainable();
        Ok(enc)
    }

    /// Marks parameters trainable according to the adapter setting: with
    /// adapters only `A`, `B` and the output norm, otherwise everything.
    pub fn reset_trainable(&mut self) {
        let adapted = self.lora.is_some();
        let trainable: Vec<bool> = self
            .params
            .names
            .iter()
            .map(|n| !adapted || n.contains(".lora_") || n.starts_with("output.norm"))
            .collect();
        for (t, flag) in self.params.tensors.iter_mut().zip(trainable) {
            t.requires_grad = flag;
        }
    }

    /// Freezes every parameter.
    pub fn freeze_all(&mut self) {
        self.params.tensors.iter_mut().for_each(|t| t.requires_grad = false);
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Number of entries in all adapter `A` and `B` matrices.
    pub fn lora_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.contains(".lora_"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// The adapter on one projection of one layer, as a standalone value.
    pub fn adapter(&self, layer: usize, target: LoraTarget) -> Option<LoraAdapter> {
        let l = self.layers.get(layer)?;
        let (lin, ad) = match target {
            LoraTarget::Query => (&l.query, l.query_lora.as_ref()?),
            LoraTarget::Value => (&l.value, l.value_lora.as_ref()?),
        };
        let scaling = self.lora.as_ref()?.scaling();
        LoraAdapter::new(
            self.params.get(lin.weight).clone(),
            self.params.get(ad.a).clone(),
            self.params.get(ad.b).clone(),
            scaling,
        )
        .ok()
    }

    /// Folds every adapter into its base weight and drops the adapters.
    pub fn merged(&self) -> Encoder {
        let mut out = self.clone();
        if self.lora.is_none() {
            return out;
        }
        for l in 0..self.layers.len() {
            for target in [LoraTarget::Query, LoraTarget::Value] {
                if let Some(ad) = self.adapter(l, target) {
                    let merged = crate::lora::merge_weights(&ad);
                    let layer = &out.layers[l];
                    let w = match target {
                        LoraTarget::Query => layer.query.weight,
                        LoraTarget::Value => layer.value.weight,
                    };
                    out.params.get_mut(w).data = merged.data;
                }
            }
            out.layers[l].query_lora = None;
            out.layers[l].value_lora = None;
        }
        out.lora = None;
        out
    }

    /// Encodes a batch without recording gradients.
    pub fn encode(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &vars, batch, Mode::Eval)?;
        Ok(tape.tensor(out))
    }

    /// Records the forward pass, returning `[batch × d_model]` embeddings.
    ///
    /// `vars` must come from binding this encoder's [`ParamStore`] (possibly
    /// with some entries substituted by other leaves of the same shape).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &[TokenSequence], mut mode: Mode<'_>) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Invalid("cannot encode an empty batch".into()));
        }
        let cfg = &self.config;
        for s in batch {
            if s.ids.len() != cfg.max_len {
                return Err(Error::Data(format!(
                    "sequence length {} does not match encoder max_len {}",
                    s.ids.len(),
                    cfg.max_len
                )));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "token id {bad} is outside the vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
        }
        // Positions beyond the longest sequence are padding for every row and
        // never influence unpadded positions, so they are dropped.
        let seq_len = batch.iter().map(|s| s.length).max().unwrap_or(1).max(1);
        let lengths: Vec<usize> = batch.iter().map(|s| s.length.max(1)).collect();
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids[..seq_len].iter().copied()).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();
        let v = |id: ParamId| vars[id.0];

        let tok = tape.gather_rows(v(self.token_emb), &ids)?;
        let pos = tape.gather_rows(v(self.pos_emb), &positions)?;
        let emb = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(emb, v(self.emb_norm.gamma), v(self.emb_norm.beta), LN_EPS)?;

        let scaling = self.lora.as_ref().map_or(1.0, LoraConfig::scaling);
        let dropout = self.lora.as_ref().map_or(0.0, |l| l.dropout);
        let rows = batch.len() * seq_len;
        for layer in &self.layers {
            let linear = |tape: &mut Tape, x: Var, lin: &Linear| -> Result<Var> {
                let y = tape.matmul(x, v(lin.weight))?;
                tape.add_row(y, v(lin.bias))
            };
            let mut q = linear(tape, x, &layer.query)?;
            let k = linear(tape, x, &layer.key)?;
            let mut val = linear(tape, x, &layer.value)?;
            for (proj, ad) in [(&mut q, &layer.query_lora), (&mut val, &layer.value_lora)] {
                if let Some(ad) = ad {
                    let mask = match &mut mode {
                        Mode::Train(rng) if dropout > 0.0 => Some(dropout_mask(rng, rows, cfg.d_model, dropout)),
                        _ => None,
                    };
                    let delta = lora_delta(tape, x, v(ad.a), v(ad.b), scaling, mask)?;
                    *proj = tape.add(*proj, delta)?;
                }
            }
            let attn = tape.attention(q, k, val, &lengths, seq_len, cfg.n_heads)?;
            let o = linear(tape, attn, &layer.output)?;
            let res = tape.add(x, o)?;
            x = tape.layer_norm(res, v(layer.attn_norm.gamma), v(layer.attn_norm.beta), LN_EPS)?;
            let h = linear(tape, x, &layer.ff_in)?;
            let h = tape.gelu(h);
            let f = linear(tape, h, &layer.ff_out)?;
            let res = tape.add(x, f)?;
            x = tape.layer_norm(res, v(layer.ff_norm.gamma), v(layer.ff_norm.beta), LN_EPS)?;
        }
        x = tape.layer_norm(x, v(self.output_norm.gamma), v(self.output_norm.beta), LN_EPS)?;

        match cfg.pooling {
            Pooling::Cls => {
                let firsts: Vec<usize> = (0..batch.len()).map(|b| b * seq_len).collect();
                tape.gather_rows(x, &firsts)
            }
            Pooling::Mean => {
                let mut pooled = Vec::with_capacity(batch.len());
                for (b, &len) in lengths.iter().enumerate() {
                    let rows = tape.slice_rows(x, b * seq_len, len)?;
                    pooled.push(tape.mean_rows(rows)?);
                }
                tape.concat_rows(&pooled)
            }
        }
    }

    pub(crate) fn from_parts(config: EncoderConfig, lora: Option<LoraConfig>, tensors: Vec<(String, Tensor)>, seed: u64) -> Result<Self> {
        let mut enc = Encoder::new(config, lora, seed)?;
        if tensors.len() != enc.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                enc.params.len()
            )));
        }
        for ((name, slot), (loaded_name, t)) in enc.params.names.iter().zip(enc.params.tensors.iter_mut()).zip(tensors) {
            if *name != loaded_name || slot.shape != t.shape {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{loaded_name}` {:?} does not match `{name}` {:?}",
                    t.shape, slot.shape
                )));
            }
            slot.data = t.data;
            slot.requires_grad = t.requires_grad;
        }
        Ok(enc)
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape and data agree")
}
