//! Small transformer encoder with a masked-language-model head.
//!
//! Post-norm architecture: learned token + absolute position embeddings,
//! per-layer multi-head self-attention and GELU feed-forward blocks each
//! followed by a residual layer norm, and a final layer norm. The MLM
//! projection is tied to the token embedding with a per-vocab output bias.

mod pretrain;

pub use pretrain::{mlm_loss, mlm_mask, pretrain, MlmBatch, PretrainOptions};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, HasWeights, WeightEntry};
use crate::error::{Error, Result};
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::{Scalar, Tensor};
use crate::tokenizer::{encode, Vocabulary};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Additive score for masked-out key positions.
const ATTENTION_MASK_VALUE: f64 = -1e9;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub feed_forward: usize,
    pub max_position: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Named desk-scale presets; `max_position` is always 512.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (layers, heads, hidden) = match name {
            "pv-base-mini" => (2, 2, 64),
            "pv-large-mini" => (4, 4, 128),
            other => {
                return Err(Error::invalid_argument(format!(
                    "unknown preset {other:?} (expected pv-base-mini or pv-large-mini)"
                )))
            }
        };
        Ok(EncoderConfig {
            layers,
            heads,
            hidden,
            feed_forward: hidden * 4,
            max_position: 512,
            vocab_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.hidden == 0
            || self.feed_forward == 0
            || self.max_position == 0
            || self.vocab_size == 0
        {
            return Err(Error::invalid_argument("encoder config fields must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::invalid_argument(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_position > 512 {
            return Err(Error::invalid_argument(format!(
                "max position {} exceeds the 512-token budget",
                self.max_position
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    fn identity(n: usize) -> Self {
        NormParams { gamma: Tensor::filled(vec![n], T::one()), beta: Tensor::zeros(vec![n]) }
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub attn_norm: NormParams<T>,
    pub ff_in: Tensor<T>,
    pub ff_in_bias: Tensor<T>,
    pub ff_out: Tensor<T>,
    pub ff_out_bias: Tensor<T>,
    pub ff_norm: NormParams<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderModel<T = f32> {
    pub config: EncoderConfig,
    pub preset: Option<String>,
    pub vocab_sha256: String,
    pub steps_trained: u64,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: NormParams<T>,
    pub mlm_bias: Tensor<T>,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn init<R: Rng>(
        config: &EncoderConfig,
        preset: Option<String>,
        vocab_sha256: String,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let f = config.feed_forward;
        let mut layers = Vec::with_capacity(config.layers);
        let token_embedding = Tensor::randn(vec![config.vocab_size, h], INIT_STD, rng);
        let position_embedding = Tensor::randn(vec![config.max_position, h], INIT_STD, rng);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                wq: Tensor::randn(vec![h, h], INIT_STD, rng),
                bq: Tensor::zeros(vec![h]),
                wk: Tensor::randn(vec![h, h], INIT_STD, rng),
                bk: Tensor::zeros(vec![h]),
                wv: Tensor::randn(vec![h, h], INIT_STD, rng),
                bv: Tensor::zeros(vec![h]),
                wo: Tensor::randn(vec![h, h], INIT_STD, rng),
                bo: Tensor::zeros(vec![h]),
                attn_norm: NormParams::identity(h),
                ff_in: Tensor::randn(vec![h, f], INIT_STD, rng),
                ff_in_bias: Tensor::zeros(vec![f]),
                ff_out: Tensor::randn(vec![f, h], INIT_STD, rng),
                ff_out_bias: Tensor::zeros(vec![h]),
                ff_norm: NormParams::identity(h),
            });
        }
        Ok(EncoderModel {
            config: config.clone(),
            preset,
            vocab_sha256,
            steps_trained: 0,
            token_embedding,
            position_embedding,
            layers,
            final_norm: NormParams::identity(h),
            mlm_bias: Tensor::zeros(vec![config.vocab_size]),
        })
    }

    /// Parameters in the fixed checkpoint/optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn.wq"), &l.wq));
            out.push((format!("layer.{i}.attn.bq"), &l.bq));
            out.push((format!("layer.{i}.attn.wk"), &l.wk));
            out.push((format!("layer.{i}.attn.bk"), &l.bk));
            out.push((format!("layer.{i}.attn.wv"), &l.wv));
            out.push((format!("layer.{i}.attn.bv"), &l.bv));
            out.push((format!("layer.{i}.attn.wo"), &l.wo));
            out.push((format!("layer.{i}.attn.bo"), &l.bo));
            out.push((format!("layer.{i}.attn_norm.gamma"), &l.attn_norm.gamma));
            out.push((format!("layer.{i}.attn_norm.beta"), &l.attn_norm.beta));
            out.push((format!("layer.{i}.ff_in"), &l.ff_in));
            out.push((format!("layer.{i}.ff_in_bias"), &l.ff_in_bias));
            out.push((format!("layer.{i}.ff_out"), &l.ff_out));
            out.push((format!("layer.{i}.ff_out_bias"), &l.ff_out_bias));
            out.push((format!("layer.{i}.ff_norm.gamma"), &l.ff_norm.gamma));
            out.push((format!("layer.{i}.ff_norm.beta"), &l.ff_norm.beta));
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out.push(("mlm_bias".into(), &self.mlm_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer.{i}.attn.wq"), &mut l.wq));
            out.push((format!("layer.{i}.attn.bq"), &mut l.bq));
            out.push((format!("layer.{i}.attn.wk"), &mut l.wk));
            out.push((format!("layer.{i}.attn.bk"), &mut l.bk));
            out.push((format!("layer.{i}.attn.wv"), &mut l.wv));
            out.push((format!("layer.{i}.attn.bv"), &mut l.bv));
            out.push((format!("layer.{i}.attn.wo"), &mut l.wo));
            out.push((format!("layer.{i}.attn.bo"), &mut l.bo));
            out.push((format!("layer.{i}.attn_norm.gamma"), &mut l.attn_norm.gamma));
            out.push((format!("layer.{i}.attn_norm.beta"), &mut l.attn_norm.beta));
            out.push((format!("layer.{i}.ff_in"), &mut l.ff_in));
            out.push((format!("layer.{i}.ff_in_bias"), &mut l.ff_in_bias));
            out.push((format!("layer.{i}.ff_out"), &mut l.ff_out));
            out.push((format!("layer.{i}.ff_out_bias"), &mut l.ff_out_bias));
            out.push((format!("layer.{i}.ff_norm.gamma"), &mut l.ff_norm.gamma));
            out.push((format!("layer.{i}.ff_norm.beta"), &mut l.ff_norm.beta));
        }
        out.push(("final_norm.gamma".into(), &mut self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &mut self.final_norm.beta));
        out.push(("mlm_bias".into(), &mut self.mlm_bias));
        out
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            preset: self.preset.clone(),
            vocab_sha256: self.vocab_sha256.clone(),
            steps_trained: self.steps_trained,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    attn_norm: NormParams { gamma: l.attn_norm.gamma.cast(), beta: l.attn_norm.beta.cast() },
                    ff_in: l.ff_in.cast(),
                    ff_in_bias: l.ff_in_bias.cast(),
                    ff_out: l.ff_out.cast(),
                    ff_out_bias: l.ff_out_bias.cast(),
                    ff_norm: NormParams { gamma: l.ff_norm.gamma.cast(), beta: l.ff_norm.beta.cast() },
                })
                .collect(),
            final_norm: NormParams {
                gamma: self.final_norm.gamma.cast(),
                beta: self.final_norm.beta.cast(),
            },
            mlm_bias: self.mlm_bias.cast(),
        }
    }

    /// Hidden states for a token sequence; `attend[j]` is false at padding.
    pub fn forward(&self, ids: &[u32], attend: &[bool]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let taped = TapedEncoder::register(&mut tape, self);
        let out = taped.forward(&mut tape, &self.config, ids, attend)?;
        Ok(tape.value(out).clone())
    }

    /// Mean pooling of final hidden states over non-special positions.
    pub fn embed(&self, vocab: &Vocabulary, text: &str) -> Result<Vec<T>> {
        let seq = encode(vocab, text, true);
        let pool: Vec<usize> = seq
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !vocab.is_special(id))
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            return Err(Error::invalid_argument(
                "text has no content tokens after tokenization".to_string(),
            ));
        }
        let attend = vec![true; seq.ids.len()];
        let hidden = self.forward(&seq.ids, &attend)?;
        let h = self.config.hidden;
        let mut pooled = vec![T::zero(); h];
        for &row in &pool {
            for (acc, &v) in pooled.iter_mut().zip(hidden.row(row)) {
                *acc += v;
            }
        }
        let inv = T::one() / T::from_f64(pool.len() as f64);
        for v in pooled.iter_mut() {
            *v = *v * inv;
        }
        Ok(pooled)
    }
}

/// Node ids of one registration of the encoder weights on a tape.
pub(crate) struct TapedEncoder {
    token_embedding: NodeId,
    position_embedding: NodeId,
    layers: Vec<TapedLayer>,
    final_gamma: NodeId,
    final_beta: NodeId,
    mlm_bias: NodeId,
}

pub(crate) struct TapedLayer {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    attn_gamma: NodeId,
    attn_beta: NodeId,
    ff_in: NodeId,
    ff_in_bias: NodeId,
    ff_out: NodeId,
    ff_out_bias: NodeId,
    ff_gamma: NodeId,
    ff_beta: NodeId,
}

impl TapedEncoder {
    pub(crate) fn register<T: Scalar>(tape: &mut Tape<T>, model: &EncoderModel<T>) -> Self {
        let token_embedding = tape.leaf(model.token_embedding.clone());
        let position_embedding = tape.leaf(model.position_embedding.clone());
        let layers = model
            .layers
            .iter()
            .map(|l| TapedLayer {
                wq: tape.leaf(l.wq.clone()),
                bq: tape.leaf(l.bq.clone()),
                wk: tape.leaf(l.wk.clone()),
                bk: tape.leaf(l.bk.clone()),
                wv: tape.leaf(l.wv.clone()),
                bv: tape.leaf(l.bv.clone()),
                wo: tape.leaf(l.wo.clone()),
                bo: tape.leaf(l.bo.clone()),
                attn_gamma: tape.leaf(l.attn_norm.gamma.clone()),
                attn_beta: tape.leaf(l.attn_norm.beta.clone()),
                ff_in: tape.leaf(l.ff_in.clone()),
                ff_in_bias: tape.leaf(l.ff_in_bias.clone()),
                ff_out: tape.leaf(l.ff_out.clone()),
                ff_out_bias: tape.leaf(l.ff_out_bias.clone()),
                ff_gamma: tape.leaf(l.ff_norm.gamma.clone()),
                ff_beta: tape.leaf(l.ff_norm.beta.clone()),
            })
            .collect();
        TapedEncoder {
            token_embedding,
            position_embedding,
            layers,
            final_gamma: tape.leaf(model.final_norm.gamma.clone()),
            final_beta: tape.leaf(model.final_norm.beta.clone()),
            mlm_bias: tape.leaf(model.mlm_bias.clone()),
        }
    }

    /// Node ids in [`EncoderModel::named_params`] order, for gradient
    /// collection.
    pub(crate) fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.attn_gamma, l.attn_beta,
                l.ff_in, l.ff_in_bias, l.ff_out, l.ff_out_bias, l.ff_gamma, l.ff_beta,
            ]);
        }
        out.extend([self.final_gamma, self.final_beta, self.mlm_bias]);
        out
    }

    /// Final hidden states node of shape `(len, hidden)`.
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        config: &EncoderConfig,
        ids: &[u32],
        attend: &[bool],
    ) -> Result<NodeId> {
        let len = ids.len();
        if len == 0 {
            return Err(Error::invalid_argument("cannot encode an empty sequence".to_string()));
        }
        if len > config.max_position {
            return Err(Error::invalid_argument(format!(
                "sequence length {len} exceeds max position {}",
                config.max_position
            )));
        }
        if attend.len() != len {
            return Err(Error::invalid_argument("padding mask length mismatch".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::invalid_argument(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }

        let eps = T::from_f64(LAYER_NORM_EPS);
        let indices: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather_rows(self.token_embedding, indices)?;
        let pos = tape.gather_rows(self.position_embedding, (0..len).collect())?;
        let mut x = tape.add(tok, pos)?;

        // additive key mask: 0 where attended, large negative at padding
        let mask_value = T::from_f64(ATTENTION_MASK_VALUE);
        let mut mask_data = vec![T::zero(); len * len];
        for (j, &keep) in attend.iter().enumerate() {
            if !keep {
                for i in 0..len {
                    mask_data[i * len + j] = mask_value;
                }
            }
        }
        let mask = tape.leaf(Tensor::new(vec![len, len], mask_data)?);

        let head_dim = config.hidden / config.heads;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        for layer in &self.layers {
            let q = tape.matmul(x, layer.wq)?;
            let q = tape.add_row(q, layer.bq)?;
            let k = tape.matmul(x, layer.wk)?;
            let k = tape.add_row(k, layer.bk)?;
            let v = tape.matmul(x, layer.wv)?;
            let v = tape.add_row(v, layer.bv)?;

            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let scores = tape.matmul_transb(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let scores = tape.add(scores, mask)?;
                let probs = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(heads)?;
            let attn_out = tape.matmul(ctx, layer.wo)?;
            let attn_out = tape.add_row(attn_out, layer.bo)?;
            let residual = tape.add(x, attn_out)?;
            x = tape.layer_norm(residual, layer.attn_gamma, layer.attn_beta, eps)?;

            let ff = tape.matmul(x, layer.ff_in)?;
            let ff = tape.add_row(ff, layer.ff_in_bias)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, layer.ff_out)?;
            let ff = tape.add_row(ff, layer.ff_out_bias)?;
            let residual = tape.add(x, ff)?;
            x = tape.layer_norm(residual, layer.ff_gamma, layer.ff_beta, eps)?;
        }
        tape.layer_norm(x, self.final_gamma, self.final_beta, eps)
    }

    /// MLM logits node `(positions, vocab)` using the tied embedding plus
    /// the output bias.
    pub(crate) fn mlm_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        hidden: NodeId,
        positions: Vec<usize>,
    ) -> Result<NodeId> {
        let selected = tape.gather_rows(hidden, positions)?;
        let logits = tape.matmul_transb(selected, self.token_embedding)?;
        tape.add_row(logits, self.mlm_bias)
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EncoderManifest {
    pub kind: String,
    pub format_version: u32,
    pub config: EncoderConfig,
    pub preset: Option<String>,
    pub vocab_sha256: String,
    pub steps_trained: u64,
    pub weights: Vec<WeightEntry>,
}

impl HasWeights for EncoderManifest {
    fn weights(&self) -> &[WeightEntry] {
        &self.weights
    }
}

impl EncoderModel<f32> {
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let named = self.named_params();
        let manifest = EncoderManifest {
            kind: "encoder".to_string(),
            format_version: 1,
            config: self.config.clone(),
            preset: self.preset.clone(),
            vocab_sha256: self.vocab_sha256.clone(),
            steps_trained: self.steps_trained,
            weights: named
                .iter()
                .map(|(name, t)| WeightEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let arrays: Vec<(&str, &[usize], &[f32])> =
            named.iter().map(|(name, t)| (name.as_str(), t.shape(), t.data())).collect();
        checkpoint::write_container(dir, &manifest, &arrays)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let parts = checkpoint::read_container::<EncoderManifest>(dir)?;
        Self::from_parts(parts.manifest, parts.arrays)
    }

    pub(crate) fn from_parts(
        manifest: EncoderManifest,
        arrays: Vec<(WeightEntry, Vec<f32>)>,
    ) -> Result<Self> {
        if manifest.kind != "encoder" {
            return Err(Error::malformed(
                "encoder checkpoint",
                format!("kind is {:?}", manifest.kind),
            ));
        }
        manifest.config.validate()?;
        // Template model gives the expected name/shape sequence.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = EncoderModel::<f32>::init(
            &manifest.config,
            manifest.preset.clone(),
            manifest.vocab_sha256.clone(),
            &mut rng,
        )?;
        model.steps_trained = manifest.steps_trained;
        {
            let mut params = model.named_params_mut();
            if params.len() != arrays.len() {
                return Err(Error::malformed(
                    "encoder checkpoint",
                    format!("expected {} weight arrays, found {}", params.len(), arrays.len()),
                ));
            }
            for ((name, slot), (entry, data)) in params.iter_mut().zip(arrays) {
                if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                    return Err(Error::malformed(
                        "encoder checkpoint",
                        format!(
                            "weight {:?} with shape {:?} does not match expected {name:?} {:?}",
                            entry.name,
                            entry.shape,
                            slot.shape()
                        ),
                    ));
                }
                **slot = Tensor::new(entry.shape, data)?;
            }
        }
        Ok(model)
    }
}

use rand::SeedableRng;
