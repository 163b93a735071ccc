//! Bidirectional masked language model: token embedder, post-norm
//! transformer encoder, MLM head, BERT-style corruption and text-only
//! pretraining.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionLayout, GradMode, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{adapter_apply, LayerAdapters};
use crate::optim::{adam_step, AdamConfig, LrSchedule};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary, CLS, MASK, N_SPECIAL, SEP};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Corruption is redrawn this many times before a sample is skipped.
pub const MAX_CORRUPTION_TRIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiLmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    /// Positions `0..prompt_len` are reserved for the visual prompt; text
    /// always starts at `prompt_len`.
    pub prompt_len: usize,
    pub max_text_len: usize,
    pub dropout: f32,
}

impl Default for BiLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            hidden: 64,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 256,
            max_positions: 80,
            prompt_len: 10,
            max_text_len: 64,
            dropout: 0.1,
        }
    }
}

impl BiLmConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= N_SPECIAL {
            return fail(format!("vocab_size {} leaves no word ids", self.vocab_size));
        }
        if self.hidden == 0 || self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.max_positions < self.prompt_len + self.max_text_len {
            return fail(format!(
                "max_positions {} < prompt_len {} + max_text_len {}",
                self.max_positions, self.prompt_len, self.max_text_len
            ));
        }
        if self.max_text_len < 2 {
            return fail("max_text_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub attn_gamma: ParamId,
    pub attn_beta: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub ffn_gamma: ParamId,
    pub ffn_beta: ParamId,
}

/// Handles to the language-model parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BiLmParams {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embed_gamma: ParamId,
    pub embed_beta: ParamId,
    pub layers: Vec<LayerParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl BiLmParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &BiLmConfig, rng: &mut RngStream) -> Result<Self> {
        let d = cfg.hidden;
        let token_embedding = store.add_normal("bilm.token_embedding", &[cfg.vocab_size, d], INIT_STD, rng)?;
        let position_embedding =
            store.add_normal("bilm.position_embedding", &[cfg.max_positions, d], INIT_STD, rng)?;
        let embed_gamma = store.add_filled("bilm.embed_norm.gamma", &[d], 1.0)?;
        let embed_beta = store.add_filled("bilm.embed_norm.beta", &[d], 0.0)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("bilm.layers.{l}.{n}");
            layers.push(LayerParams {
                wq: store.add_normal(p("wq"), &[d, d], INIT_STD, rng)?,
                wk: store.add_normal(p("wk"), &[d, d], INIT_STD, rng)?,
                wv: store.add_normal(p("wv"), &[d, d], INIT_STD, rng)?,
                wo: store.add_normal(p("wo"), &[d, d], INIT_STD, rng)?,
                attn_gamma: store.add_filled(p("attn_norm.gamma"), &[d], 1.0)?,
                attn_beta: store.add_filled(p("attn_norm.beta"), &[d], 0.0)?,
                w1: store.add_normal(p("w1"), &[d, cfg.ff_dim], INIT_STD, rng)?,
                w2: store.add_normal(p("w2"), &[cfg.ff_dim, d], INIT_STD, rng)?,
                ffn_gamma: store.add_filled(p("ffn_norm.gamma"), &[d], 1.0)?,
                ffn_beta: store.add_filled(p("ffn_norm.beta"), &[d], 0.0)?,
            });
        }
        let head_weight = store.add_normal("bilm.mlm_head.weight", &[cfg.vocab_size, d], INIT_STD, rng)?;
        let head_bias = store.add_filled("bilm.mlm_head.bias", &[cfg.vocab_size], 0.0)?;
        Ok(Self {
            token_embedding,
            position_embedding,
            embed_gamma,
            embed_beta,
            layers,
            head_weight,
            head_bias,
        })
    }

    /// Finds the parameters by name and checks their shapes against `cfg`.
    pub fn locate<T: Scalar>(store: &ParamStore<T>, cfg: &BiLmConfig) -> Result<Self> {
        let d = cfg.hidden;
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store.require(&name)?;
            if store.tensor(id).shape() != shape {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.tensor(id).shape()
                )));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("bilm.layers.{l}.{n}");
            layers.push(LayerParams {
                wq: get(p("wq"), &[d, d])?,
                wk: get(p("wk"), &[d, d])?,
                wv: get(p("wv"), &[d, d])?,
                wo: get(p("wo"), &[d, d])?,
                attn_gamma: get(p("attn_norm.gamma"), &[d])?,
                attn_beta: get(p("attn_norm.beta"), &[d])?,
                w1: get(p("w1"), &[d, cfg.ff_dim])?,
                w2: get(p("w2"), &[cfg.ff_dim, d])?,
                ffn_gamma: get(p("ffn_norm.gamma"), &[d])?,
                ffn_beta: get(p("ffn_norm.beta"), &[d])?,
            });
        }
        Ok(Self {
            token_embedding: get("bilm.token_embedding".into(), &[cfg.vocab_size, d])?,
            position_embedding: get("bilm.position_embedding".into(), &[cfg.max_positions, d])?,
            embed_gamma: get("bilm.embed_norm.gamma".into(), &[d])?,
            embed_beta: get("bilm.embed_norm.beta".into(), &[d])?,
            layers,
            head_weight: get("bilm.mlm_head.weight".into(), &[cfg.vocab_size, d])?,
            head_bias: get("bilm.mlm_head.bias".into(), &[cfg.vocab_size])?,
        })
    }

    pub fn norm_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_gamma, self.embed_beta];
        for l in &self.layers {
            ids.extend([l.attn_gamma, l.attn_beta, l.ffn_gamma, l.ffn_beta]);
        }
        ids
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.token_embedding,
            self.position_embedding,
            self.embed_gamma,
            self.embed_beta,
        ];
        for l in &self.layers {
            ids.extend([
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.attn_gamma,
                l.attn_beta,
                l.w1,
                l.w2,
                l.ffn_gamma,
                l.ffn_beta,
            ]);
        }
        ids.extend([self.head_weight, self.head_bias]);
        ids
    }

    /// Freezes every language-model weight except the normalization gains
    /// and biases. Idempotent.
    pub fn freeze<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let norms = self.norm_ids();
        for id in self.all_ids() {
            store.set_frozen(id, !norms.contains(&id));
        }
    }
}

/// Read-only view of a language model for building forward graphs.
pub struct LmView<'a, T: Scalar> {
    pub config: &'a BiLmConfig,
    pub params: &'a BiLmParams,
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> Clone for LmView<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for LmView<'_, T> {}

/// Row placement of one packed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqRows {
    pub start: usize,
    pub video_len: usize,
    pub text_len: usize,
}

impl SeqRows {
    pub fn text_row(&self, j: usize) -> usize {
        self.start + self.video_len + j
    }

    pub fn len(&self) -> usize {
        self.video_len + self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sequence to pack: optional visual prompt validity plus text.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub video_valid: Option<&'a [bool]>,
    pub text_ids: &'a [usize],
    pub text_mask: &'a [u8],
}

impl<'a> SeqInput<'a> {
    pub fn text(tokens: &'a TokenSequence) -> Self {
        Self {
            video_valid: None,
            text_ids: &tokens.ids,
            text_mask: &tokens.attention_mask,
        }
    }

    /// Text without its padding suffix; encoder outputs at content positions
    /// are unaffected by dropping masked rows.
    pub fn text_trimmed(tokens: &'a TokenSequence) -> Self {
        let n = tokens.content_len();
        Self {
            video_valid: None,
            text_ids: &tokens.ids[..n],
            text_mask: &tokens.attention_mask[..n],
        }
    }
}

pub struct Encoded {
    pub hidden: Var,
    pub rows: Vec<SeqRows>,
    /// Per-layer attention nodes (head-separated probabilities).
    pub attention: Vec<Var>,
}

impl<'a, T: Scalar> LmView<'a, T> {
    /// Token plus position embeddings before normalization.
    pub fn embed_pre_norm(&self, g: &mut Graph<T>, ids: &[usize], positions: &[usize]) -> Result<Var> {
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::TokenId {
                    id,
                    size: self.config.vocab_size,
                });
            }
        }
        let table = g.param(self.store, self.params.token_embedding);
        let tok = g.gather_rows(table, ids)?;
        self.add_positions(g, tok, positions)
    }

    fn add_positions(&self, g: &mut Graph<T>, content: Var, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_positions {
                return Err(Error::Overlength {
                    len: p + 1,
                    max: self.config.max_positions,
                });
            }
        }
        let pos_table = g.param(self.store, self.params.position_embedding);
        let pos = g.gather_rows(pos_table, positions)?;
        g.add(content, pos)
    }

    /// Content rows plus positions, then the embedding norm and dropout.
    pub fn embed_content(
        &self,
        g: &mut Graph<T>,
        content: Var,
        positions: &[usize],
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let x = self.add_positions(g, content, positions)?;
        let gm = g.param(self.store, self.params.embed_gamma);
        let bt = g.param(self.store, self.params.embed_beta);
        let x = g.layer_norm(x, gm, bt, LN_EPS)?;
        Ok(match rng {
            Some(r) => g.dropout(x, self.config.dropout as f64, r),
            None => x,
        })
    }

    /// Embeds a single text sequence at the text positions.
    pub fn embed(&self, g: &mut Graph<T>, tokens: &TokenSequence, rng: Option<&mut RngStream>) -> Result<Var> {
        let len = tokens.len();
        if self.config.prompt_len + len > self.config.max_positions {
            return Err(Error::Overlength {
                len: self.config.prompt_len + len,
                max: self.config.max_positions,
            });
        }
        let positions: Vec<usize> = (0..len).map(|j| self.config.prompt_len + j).collect();
        let table = g.param(self.store, self.params.token_embedding);
        for &id in &tokens.ids {
            if id >= self.config.vocab_size {
                return Err(Error::TokenId {
                    id,
                    size: self.config.vocab_size,
                });
            }
        }
        let tok = g.gather_rows(table, &tokens.ids)?;
        self.embed_content(g, tok, &positions, rng)
    }

    /// Runs the encoder stack. Adapters, when given, sit after each
    /// attention and feed-forward sublayer and before the residual norm.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layout: Arc<AttentionLayout>,
        adapters: Option<&[LayerAdapters]>,
        mut rng: Option<&mut RngStream>,
        mut record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if layout.rows() != g.value(x).rows() {
            return Err(Error::Shape {
                op: "encode",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![layout.rows()],
            });
        }
        if let Some(a) = adapters {
            if a.len() != self.config.n_layers {
                return Err(Error::Config(format!(
                    "{} adapter pairs for {} layers",
                    a.len(),
                    self.config.n_layers
                )));
            }
        }
        let p = self.config.dropout as f64;
        let mut h = x;
        for (l, lp) in self.params.layers.iter().enumerate() {
            let wq = g.param(self.store, lp.wq);
            let wk = g.param(self.store, lp.wk);
            let wv = g.param(self.store, lp.wv);
            let wo = g.param(self.store, lp.wo);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let att = g.attention(q, k, v, layout.clone())?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(att);
            }
            let mut a = g.matmul(att, wo)?;
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, p, r);
            }
            if let Some(ad) = adapters {
                a = adapter_apply(g, self.store, &ad[l].attn, a, p, rng.as_deref_mut())?;
            }
            let res = g.add(h, a)?;
            let gm = g.param(self.store, lp.attn_gamma);
            let bt = g.param(self.store, lp.attn_beta);
            h = g.layer_norm(res, gm, bt, LN_EPS)?;

            let w1 = g.param(self.store, lp.w1);
            let w2 = g.param(self.store, lp.w2);
            let f = g.matmul(h, w1)?;
            let f = g.gelu(f);
            let mut f = g.matmul(f, w2)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p, r);
            }
            if let Some(ad) = adapters {
                f = adapter_apply(g, self.store, &ad[l].ffn, f, p, rng.as_deref_mut())?;
            }
            let res = g.add(h, f)?;
            let gm = g.param(self.store, lp.ffn_gamma);
            let bt = g.param(self.store, lp.ffn_beta);
            h = g.layer_norm(res, gm, bt, LN_EPS)?;
        }
        Ok(h)
    }

    /// Encodes a single embedded sequence under its attention mask.
    pub fn encode_masked(
        &self,
        g: &mut Graph<T>,
        embeddings: Var,
        attention_mask: &[u8],
        adapters: Option<&[LayerAdapters]>,
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let s = g.value(embeddings).rows();
        if attention_mask.len() != s {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![s],
                rhs: vec![attention_mask.len()],
            });
        }
        if s > self.config.max_positions {
            return Err(Error::Overlength {
                len: s,
                max: self.config.max_positions,
            });
        }
        let layout = Arc::new(AttentionLayout::single(
            attention_mask.iter().map(|&m| m == 1).collect(),
            self.config.n_heads,
        ));
        self.encode(g, embeddings, layout, adapters, rng, None)
    }

    /// `hidden · headᵀ + bias`, row by row.
    pub fn mlm_logits(&self, g: &mut Graph<T>, hidden: Var) -> Result<Var> {
        let w = g.param(self.store, self.params.head_weight);
        let b = g.param(self.store, self.params.head_bias);
        let z = g.matmul_nt(hidden, w)?;
        g.add_row(z, b)
    }

    /// Packs sequences row-wise, embeds them (`video_content` supplies the
    /// visual-prompt rows in sequence order) and runs the encoder.
    pub fn forward_packed(
        &self,
        g: &mut Graph<T>,
        seqs: &[SeqInput<'_>],
        video_content: Option<Var>,
        adapters: Option<&[LayerAdapters]>,
        mut rng: Option<&mut RngStream>,
        record_attention: bool,
    ) -> Result<Encoded> {
        let cfg = self.config;
        let n_video: usize = seqs.iter().map(|s| s.video_valid.map_or(0, |v| v.len())).sum();
        let mut positions = Vec::new();
        let mut key_valid = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut rows = Vec::with_capacity(seqs.len());
        let mut order = Vec::new();
        let mut text_ids = Vec::new();
        let mut vrow = 0;
        for s in seqs {
            let start = positions.len();
            let video_len = s.video_valid.map_or(0, |v| v.len());
            if video_len > cfg.prompt_len {
                return Err(Error::Overlength {
                    len: video_len,
                    max: cfg.prompt_len,
                });
            }
            if let Some(valid) = s.video_valid {
                for (i, &ok) in valid.iter().enumerate() {
                    positions.push(i);
                    key_valid.push(ok);
                    order.push(vrow);
                    vrow += 1;
                }
            }
            if s.text_ids.len() != s.text_mask.len() {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![s.text_ids.len()],
                    rhs: vec![s.text_mask.len()],
                });
            }
            let text_len = s.text_ids.len();
            if cfg.prompt_len + text_len > cfg.max_positions {
                return Err(Error::Overlength {
                    len: cfg.prompt_len + text_len,
                    max: cfg.max_positions,
                });
            }
            for (j, (&id, &m)) in s.text_ids.iter().zip(s.text_mask).enumerate() {
                if id >= cfg.vocab_size {
                    return Err(Error::TokenId {
                        id,
                        size: cfg.vocab_size,
                    });
                }
                positions.push(cfg.prompt_len + j);
                key_valid.push(m == 1);
                order.push(n_video + text_ids.len());
                text_ids.push(id);
            }
            segments.push((start, video_len + text_len));
            rows.push(SeqRows {
                start,
                video_len,
                text_len,
            });
        }
        if positions.is_empty() {
            return Err(Error::DegenerateBatch("no rows to encode".into()));
        }
        let table = g.param(self.store, self.params.token_embedding);
        let tok = g.gather_rows(table, &text_ids)?;
        let content = match (n_video, video_content) {
            (0, _) => tok,
            (_, None) => {
                return Err(Error::Config("visual prompt rows requested without video content".into()))
            }
            (n, Some(v)) => {
                if g.value(v).rows() != n {
                    return Err(Error::Shape {
                        op: "forward",
                        lhs: g.value(v).shape().to_vec(),
                        rhs: vec![n],
                    });
                }
                let all = if text_ids.is_empty() {
                    v
                } else {
                    g.concat_rows(&[v, tok])?
                };
                g.gather_rows(all, &order)?
            }
        };
        let x = self.embed_content(g, content, &positions, rng.as_deref_mut())?;
        let layout = Arc::new(AttentionLayout::new(segments, key_valid, cfg.n_heads));
        let mut attention = Vec::new();
        let hidden = self.encode(
            g,
            x,
            layout,
            adapters,
            rng,
            if record_attention { Some(&mut attention) } else { None },
        )?;
        Ok(Encoded {
            hidden,
            rows,
            attention,
        })
    }

    /// Mean-over-masks cross-entropy per sequence, averaged over the
    /// sequences that have at least one loss position.
    pub fn packed_mlm_loss(&self, g: &mut Graph<T>, enc: &Encoded, batches: &[&MaskedBatch]) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut counts = Vec::new();
        for (r, b) in enc.rows.iter().zip(batches) {
            let m = b.n_masks();
            if m == 0 {
                continue;
            }
            for (j, &sel) in b.loss_positions.iter().enumerate() {
                if sel {
                    if j >= r.text_len {
                        return Err(Error::DegenerateBatch("loss position beyond encoded text".into()));
                    }
                    rows.push(r.text_row(j));
                    targets.push(b.original_ids[j]);
                    counts.push(m);
                }
            }
        }
        let n_seqs = batches.iter().filter(|b| b.n_masks() > 0).count();
        if n_seqs == 0 {
            return Err(Error::SkipSample);
        }
        let weights: Vec<f64> = counts
            .iter()
            .map(|&m| 1.0 / (m as f64 * n_seqs as f64))
            .collect();
        let h = g.gather_rows(enc.hidden, &rows)?;
        let logits = self.mlm_logits(g, h)?;
        g.cross_entropy_weighted(logits, &targets, &weights)
    }
}

/// Probabilities of the three replacement branches for selected tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionRates {
    pub rate: f64,
    pub to_mask: f64,
    pub keep: f64,
    pub random: f64,
}

impl Default for CorruptionRates {
    fn default() -> Self {
        Self {
            rate: 0.15,
            to_mask: 0.8,
            keep: 0.1,
            random: 0.1,
        }
    }
}

impl CorruptionRates {
    pub fn with_rate(rate: f64) -> Self {
        Self {
            rate,
            ..Self::default()
        }
    }
}

/// Which branch a selected position took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Keep,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub corrupted_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub loss_positions: Vec<bool>,
    pub attention_mask: Vec<u8>,
    pub replacements: Vec<Option<Replacement>>,
}

impl MaskedBatch {
    pub fn n_masks(&self) -> usize {
        self.loss_positions.iter().filter(|&&b| b).count()
    }

    /// Corrupted text with the padding suffix removed.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn seq_input(&self) -> SeqInput<'_> {
        let n = self.content_len();
        SeqInput {
            video_valid: None,
            text_ids: &self.corrupted_ids[..n],
            text_mask: &self.attention_mask[..n],
        }
    }
}

/// BERT-style corruption: every non-special, non-pad position is selected
/// independently with probability `rates.rate`; a selected token becomes
/// `[MASK]`, stays, or becomes a uniform random word.
pub fn corrupt(tokens: &TokenSequence, rates: &CorruptionRates, vocab_size: usize, rng: &mut RngStream) -> MaskedBatch {
    let n = tokens.len();
    let mut out = MaskedBatch {
        corrupted_ids: tokens.ids.clone(),
        original_ids: tokens.ids.clone(),
        loss_positions: vec![false; n],
        attention_mask: tokens.attention_mask.clone(),
        replacements: vec![None; n],
    };
    for j in 0..n {
        let id = tokens.ids[j];
        if tokens.attention_mask[j] == 0 || Vocabulary::is_special(id) {
            continue;
        }
        if rng.uniform() >= rates.rate {
            continue;
        }
        out.loss_positions[j] = true;
        let u = rng.uniform();
        let (new_id, kind) = if u < rates.to_mask {
            (MASK, Replacement::Mask)
        } else if u < rates.to_mask + rates.keep {
            (id, Replacement::Keep)
        } else {
            (N_SPECIAL + rng.below(vocab_size - N_SPECIAL), Replacement::Random)
        };
        out.corrupted_ids[j] = new_id;
        out.replacements[j] = Some(kind);
    }
    out
}

/// [`corrupt`], redrawn until at least one position is selected.
pub fn corrupt_nonempty(
    tokens: &TokenSequence,
    rates: &CorruptionRates,
    vocab_size: usize,
    rng: &mut RngStream,
) -> Result<MaskedBatch> {
    for _ in 0..MAX_CORRUPTION_TRIES {
        let b = corrupt(tokens, rates, vocab_size, rng);
        if b.n_masks() > 0 {
            return Ok(b);
        }
    }
    Err(Error::SkipSample)
}

/// A language model owning its parameters.
#[derive(Clone, Debug)]
pub struct BiLm {
    pub config: BiLmConfig,
    pub store: ParamStore<f32>,
    pub params: BiLmParams,
}

impl BiLm {
    pub fn new(config: BiLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngStream::named(seed, "bilm.init", 0);
        let params = BiLmParams::init(&mut store, &config, &mut rng)?;
        Ok(Self { config, store, params })
    }

    pub fn from_store(config: BiLmConfig, store: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let params = BiLmParams::locate(&store, &config)?;
        Ok(Self { config, store, params })
    }

    pub fn view(&self) -> LmView<'_, f32> {
        LmView {
            config: &self.config,
            params: &self.params,
            store: &self.store,
        }
    }

    pub fn freeze(&mut self) {
        self.params.freeze(&mut self.store);
    }

    /// Eval-mode logits (L×V) for a single text sequence.
    pub fn logits(&self, tokens: &TokenSequence) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let v = self.view();
        let x = v.embed(&mut g, tokens, None)?;
        let h = v.encode_masked(&mut g, x, &tokens.attention_mask, None, None)?;
        let z = v.mlm_logits(&mut g, h)?;
        Ok(g.value(z).clone())
    }

    /// MLM loss of one corrupted sequence.
    pub fn mlm_loss(&self, batch: &MaskedBatch, rng: Option<&mut RngStream>) -> Result<f32> {
        if batch.n_masks() == 0 {
            return Err(Error::SkipSample);
        }
        let mut g = Graph::inference();
        let v = self.view();
        let enc = v.forward_packed(&mut g, &[batch.seq_input()], None, None, rng, false)?;
        let l = v.packed_mlm_loss(&mut g, &enc, &[batch])?;
        g.value(l).item()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_fraction: f32,
    /// Dropout used while pretraining. The returned model keeps the dropout
    /// of its own config for later stages.
    pub dropout: f32,
    pub corruption: CorruptionRates,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_fraction: 0.1,
            dropout: 0.0,
            corruption: CorruptionRates::default(),
        }
    }
}

pub struct PretrainOutcome {
    pub model: BiLm,
    /// Training loss per step.
    pub losses: Vec<f32>,
}

/// Wraps a sentence with the sequence markers and encodes it.
pub fn encode_sentence(vocab: &Vocabulary, sentence: &str, max_len: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(sentence));
    ids.truncate(max_len - 1);
    ids.push(SEP);
    let n = ids.len();
    ids.resize(max_len, crate::tokenizer::PAD);
    let mut attention_mask = vec![1u8; n];
    attention_mask.resize(max_len, 0);
    TokenSequence { ids, attention_mask }
}

/// Trains every language-model parameter with Adam under a warmup-then-
/// linear-decay schedule.
pub fn pretrain_lm(
    corpus: &[String],
    vocab: &Vocabulary,
    model_config: BiLmConfig,
    config: &PretrainConfig,
    adam: &AdamConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    adam.validate()?;
    if corpus.is_empty() {
        return Err(Error::DegenerateBatch("empty pretraining corpus".into()));
    }
    let model_config = BiLmConfig {
        vocab_size: vocab.len(),
        ..model_config
    };
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config(format!("pretraining dropout {} outside [0, 1)", config.dropout)));
    }
    let stage_dropout = model_config.dropout;
    let mut model = BiLm::new(model_config, seed)?;
    model.config.dropout = config.dropout;
    let seqs: Vec<TokenSequence> = corpus
        .iter()
        .map(|s| encode_sentence(vocab, s, model.config.max_text_len))
        .collect();
    let schedule = LrSchedule::WarmupLinear {
        total_steps: config.steps,
        warmup_fraction: config.warmup_fraction,
    };
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut shuffle_rng = RngStream::named(seed, "pretrain.shuffle", 0);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut corrupt_rng = RngStream::named(seed, "pretrain.corrupt", step as u64);
        let mut dropout_rng = RngStream::named(seed, "pretrain.dropout", step as u64);
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
                epoch += 1;
            }
            let s = &seqs[order[cursor]];
            cursor += 1;
            match corrupt_nonempty(s, &config.corruption, model.config.vocab_size, &mut corrupt_rng) {
                Ok(b) => batch.push(b),
                Err(Error::SkipSample) => {
                    if epoch > 1_000 {
                        return Err(Error::DegenerateBatch("corpus never yields a masked token".into()));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let mut g = Graph::new(GradMode::Trainable);
        let view = model.view();
        let inputs: Vec<SeqInput> = batch.iter().map(|b| b.seq_input()).collect();
        let enc = view.forward_packed(&mut g, &inputs, None, None, Some(&mut dropout_rng), false)?;
        let refs: Vec<&MaskedBatch> = batch.iter().collect();
        let loss = view.packed_mlm_loss(&mut g, &enc, &refs)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        let grads = g.backward(loss)?;
        drop(g);
        model.store.accumulate_grads(grads.into_params());
        model.store.fill_missing_grads();
        let cfg = AdamConfig {
            learning_rate: config.learning_rate * schedule.factor(step),
            ..adam.clone()
        };
        adam_step(model.store.params_mut(), &cfg)?;
        losses.push(lv);
    }
    model.config.dropout = stage_dropout;
    Ok(PretrainOutcome { model, losses })
}

/// Eval-mode MLM loss averaged over `sentences` under a fixed corruption
/// stream.
pub fn evaluate_mlm_loss(model: &BiLm, vocab: &Vocabulary, sentences: &[String], rates: &CorruptionRates, seed: u64) -> Result<f32> {
    let mut rng = RngStream::named(seed, "eval.corrupt", 0);
    let batches: Vec<MaskedBatch> = sentences
        .iter()
        .filter_map(|s| {
            let t = encode_sentence(vocab, s, model.config.max_text_len);
            corrupt_nonempty(&t, rates, model.config.vocab_size, &mut rng).ok()
        })
        .collect();
    if batches.is_empty() {
        return Err(Error::SkipSample);
    }
    let mut total = 0.0f64;
    for chunk in batches.chunks(64) {
        let mut g = Graph::inference();
        let v = model.view();
        let inputs: Vec<SeqInput> = chunk.iter().map(|b| b.seq_input()).collect();
        let enc = v.forward_packed(&mut g, &inputs, None, None, None, false)?;
        let refs: Vec<&MaskedBatch> = chunk.iter().collect();
        let l = v.packed_mlm_loss(&mut g, &enc, &refs)?;
        total += g.value(l).item()? as f64 * chunk.len() as f64;
    }
    Ok((total / batches.len() as f64) as f32)
}

/// Argmax predictions at each `[MASK]` of `text` (eval mode, no video).
pub fn predict_masks(model: &BiLm, vocab: &Vocabulary, texts: &[String]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(64) {
        let seqs: Vec<TokenSequence> = chunk
            .iter()
            .map(|t| encode_sentence(vocab, t, model.config.max_text_len))
            .collect();
        let inputs: Vec<SeqInput> = seqs.iter().map(SeqInput::text_trimmed).collect();
        let mut g = Graph::inference();
        let v = model.view();
        let enc = v.forward_packed(&mut g, &inputs, None, None, None, false)?;
        let mut rows = Vec::new();
        let mut owners = Vec::new();
        for (k, (s, r)) in seqs.iter().zip(&enc.rows).enumerate() {
            for (j, &id) in s.content().iter().enumerate() {
                if id == MASK {
                    rows.push(r.text_row(j));
                    owners.push(k);
                }
            }
        }
        let mut preds = vec![Vec::new(); chunk.len()];
        if !rows.is_empty() {
            let h = g.gather_rows(enc.hidden, &rows)?;
            let z = v.mlm_logits(&mut g, h)?;
            let zt = g.value(z);
            for (i, &k) in owners.iter().enumerate() {
                preds[k].push(argmax(zt.row(i)));
            }
        }
        out.extend(preds);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
