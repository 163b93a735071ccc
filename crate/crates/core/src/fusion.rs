//! Visual adaptation of a frozen language model: projection of frame
//! features into the embedding space, residual bottleneck adapters and the
//! visually-conditioned MLM training loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph, Var};
use crate::bilm::{
    corrupt_nonempty, encode_sentence, BiLm, BiLmConfig, BiLmParams, CorruptionRates, Encoded, LmView, MaskedBatch,
    SeqInput, INIT_STD,
};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, LrSchedule};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Per-frame visual features of one clip, padded to the prompt length.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    /// Row-major `frames × dim`.
    pub features: Vec<f32>,
    pub valid: Vec<bool>,
    pub dim: usize,
    pub source_id: String,
}

impl VideoFeatures {
    pub fn new(source_id: impl Into<String>, features: Vec<f32>, valid: Vec<bool>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != valid.len() * dim {
            return Err(Error::Shape {
                op: "video_features",
                lhs: vec![features.len()],
                rhs: vec![valid.len(), dim],
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite video feature".into()));
        }
        Ok(Self {
            features,
            valid,
            dim,
            source_id: source_id.into(),
        })
    }

    /// A prompt of `frames` zero rows, all masked.
    pub fn empty(frames: usize, dim: usize) -> Self {
        Self {
            features: vec![0.0; frames * dim],
            valid: vec![false; frames],
            dim,
            source_id: String::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.valid.len()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Pads with invalid zero rows (or truncates) to exactly `frames`.
    pub fn padded(mut self, frames: usize) -> Self {
        self.features.resize(frames * self.dim, 0.0);
        self.valid.resize(frames, false);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub feature_dim: usize,
    /// Adapter bottleneck width; 0 means `hidden / 8`.
    pub adapter_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            adapter_dim: 0,
        }
    }
}

impl FusionConfig {
    pub fn bottleneck(&self, hidden: usize) -> usize {
        if self.adapter_dim == 0 {
            hidden / 8
        } else {
            self.adapter_dim
        }
    }

    pub fn validate(&self, lm: &BiLmConfig) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.bottleneck(lm.hidden) == 0 {
            return Err(Error::Config("adapter bottleneck width is zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

/// The two adapters of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters {
    pub attn: AdapterParams,
    pub ffn: AdapterParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `z + dropout(ReLU(z·W↓ + b↓)·W↑ + b↑)`, row by row.
pub fn adapter_apply<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    a: &AdapterParams,
    z: Var,
    dropout: f64,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    let wd = g.param(store, a.w_down);
    let bd = g.param(store, a.b_down);
    let wu = g.param(store, a.w_up);
    let bu = g.param(store, a.b_up);
    let h = g.matmul(z, wd)?;
    let h = g.add_row(h, bd)?;
    let h = g.relu(h);
    let h = g.matmul(h, wu)?;
    let mut h = g.add_row(h, bu)?;
    if let Some(r) = rng {
        h = g.dropout(h, dropout, r);
    }
    g.add(z, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Frozen,
    Unfrozen,
    FrozenNoAdapters,
    RandomLm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::RandomLm,
        Variant::Unfrozen,
        Variant::FrozenNoAdapters,
        Variant::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Unfrozen => "unfrozen",
            Variant::FrozenNoAdapters => "frozen_no_adapters",
            Variant::RandomLm => "random_lm",
        }
    }

    pub fn has_adapters(self) -> bool {
        self != Variant::FrozenNoAdapters
    }

    /// Learning-rate multiplier and batch divisor for this row.
    pub fn lr_and_batch(self, lr: f32, batch: usize) -> (f32, usize) {
        match self {
            Variant::Unfrozen => (lr * 0.5, (batch / 2).max(1)),
            Variant::FrozenNoAdapters => (lr * 10.0, batch),
            Variant::Frozen | Variant::RandomLm => (lr, batch),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Frozen language model plus visual projection and adapters.
#[derive(Clone, Debug)]
pub struct FrozenVlm {
    pub lm_config: BiLmConfig,
    pub fusion_config: FusionConfig,
    pub variant: Variant,
    pub store: ParamStore<f32>,
    pub lm: BiLmParams,
    pub projection: ProjectionParams,
    /// Empty when the variant has no adapters.
    pub adapters: Vec<LayerAdapters>,
}

pub(crate) fn init_adapter<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    dh: usize,
    rng: &mut RngStream,
) -> Result<AdapterParams> {
    Ok(AdapterParams {
        w_down: store.add_normal(format!("{prefix}.w_down"), &[d, dh], INIT_STD, rng)?,
        b_down: store.add_filled(format!("{prefix}.b_down"), &[dh], 0.0)?,
        w_up: store.add_filled(format!("{prefix}.w_up"), &[dh, d], 0.0)?,
        b_up: store.add_filled(format!("{prefix}.b_up"), &[d], 0.0)?,
    })
}

/// Adds projection and (optionally) adapters to `store`.
pub fn init_fusion<T: Scalar>(
    store: &mut ParamStore<T>,
    lm: &BiLmConfig,
    fusion: &FusionConfig,
    with_adapters: bool,
    rng: &mut RngStream,
) -> Result<(ProjectionParams, Vec<LayerAdapters>)> {
    fusion.validate(lm)?;
    let d = lm.hidden;
    let projection = ProjectionParams {
        weight: store.add_normal("fusion.projection.weight", &[fusion.feature_dim, d], INIT_STD, rng)?,
        bias: store.add_filled("fusion.projection.bias", &[d], 0.0)?,
    };
    let mut adapters = Vec::new();
    if with_adapters {
        let dh = fusion.bottleneck(d);
        for l in 0..lm.n_layers {
            adapters.push(LayerAdapters {
                attn: init_adapter(store, &format!("fusion.adapters.{l}.attn"), d, dh, rng)?,
                ffn: init_adapter(store, &format!("fusion.adapters.{l}.ffn"), d, dh, rng)?,
            });
        }
    }
    Ok((projection, adapters))
}

fn locate_adapter<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<AdapterParams> {
    Ok(AdapterParams {
        w_down: store.require(&format!("{prefix}.w_down"))?,
        b_down: store.require(&format!("{prefix}.b_down"))?,
        w_up: store.require(&format!("{prefix}.w_up"))?,
        b_up: store.require(&format!("{prefix}.b_up"))?,
    })
}

impl FrozenVlm {
    /// Wraps a pretrained model for the given ablation row. `random_lm`
    /// replaces the language-model weights by a fresh initialization.
    pub fn from_lm(lm: BiLm, fusion: FusionConfig, variant: Variant, seed: u64) -> Result<Self> {
        let lm = if variant == Variant::RandomLm {
            BiLm::new(lm.config.clone(), seed ^ 0x5eed_0f_1a4d)?
        } else {
            lm
        };
        let BiLm {
            config,
            mut store,
            params,
        } = lm;
        let mut rng = RngStream::named(seed, "fusion.init", 0);
        let (projection, adapters) = init_fusion(&mut store, &config, &fusion, variant.has_adapters(), &mut rng)?;
        let mut vlm = Self {
            lm_config: config,
            fusion_config: fusion,
            variant,
            store,
            lm: params,
            projection,
            adapters,
        };
        vlm.apply_freezing();
        Ok(vlm)
    }

    /// Rebuilds handles from a loaded parameter store.
    pub fn from_store(
        lm_config: BiLmConfig,
        fusion_config: FusionConfig,
        variant: Variant,
        store: ParamStore<f32>,
    ) -> Result<Self> {
        lm_config.validate()?;
        fusion_config.validate(&lm_config)?;
        let lm = BiLmParams::locate(&store, &lm_config)?;
        let projection = ProjectionParams {
            weight: store.require("fusion.projection.weight")?,
            bias: store.require("fusion.projection.bias")?,
        };
        let w = store.tensor(projection.weight).shape();
        if w != [fusion_config.feature_dim, lm_config.hidden] {
            return Err(Error::Format(format!("projection shape {w:?} does not match config")));
        }
        let mut adapters = Vec::new();
        if store.find("fusion.adapters.0.attn.w_down").is_some() {
            for l in 0..lm_config.n_layers {
                adapters.push(LayerAdapters {
                    attn: locate_adapter(&store, &format!("fusion.adapters.{l}.attn"))?,
                    ffn: locate_adapter(&store, &format!("fusion.adapters.{l}.ffn"))?,
                });
            }
        }
        if adapters.is_empty() == variant.has_adapters() {
            return Err(Error::Format(format!(
                "variant {variant} does not match the stored adapter set"
            )));
        }
        Ok(Self {
            lm_config,
            fusion_config,
            variant,
            store,
            lm,
            projection,
            adapters,
        })
    }

    /// Sets frozen flags for the current variant.
    pub fn apply_freezing(&mut self) {
        match self.variant {
            Variant::Unfrozen => {
                for p in self.store.params_mut() {
                    p.frozen = false;
                }
            }
            _ => {
                self.lm.freeze(&mut self.store);
                for id in self.fusion_ids() {
                    self.store.set_frozen(id, false);
                }
            }
        }
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters
            .iter()
            .flat_map(|l| [&l.attn, &l.ffn])
            .flat_map(|a| [a.w_down, a.b_down, a.w_up, a.b_up])
            .collect()
    }

    pub fn fusion_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.projection.weight, self.projection.bias];
        ids.extend(self.adapter_ids());
        ids
    }

    pub fn adapters(&self) -> Option<&[LayerAdapters]> {
        if self.adapters.is_empty() {
            None
        } else {
            Some(&self.adapters)
        }
    }

    pub fn view(&self) -> VlmView<'_, f32> {
        self.view_with(&self.store)
    }

    /// View over another store with this model's layout (for instance the
    /// f64 cast used by gradient checks).
    pub fn view_with<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>) -> VlmView<'a, T> {
        VlmView {
            lm: LmView {
                config: &self.lm_config,
                params: &self.lm,
                store,
            },
            projection: &self.projection,
            adapters: self.adapters(),
            feature_dim: self.fusion_config.feature_dim,
        }
    }

    pub fn trainable_param_report(&self) -> ParamReport {
        let count = |ids: &[ParamId]| ids.iter().map(|&id| self.store.get(id).numel()).sum::<usize>();
        let projection = count(&[self.projection.weight, self.projection.bias]);
        let adapters = count(&self.adapter_ids());
        let norms = count(&self.lm.norm_ids());
        let total = self.store.total_numel();
        let trainable = self.store.trainable_numel();
        ParamReport {
            projection,
            adapters,
            norms,
            frozen: total - trainable,
            trainable,
            total,
            trainable_fraction: trainable as f64 / total as f64,
        }
    }

    /// Eval-mode logits at the text positions of one example.
    pub fn text_logits(&self, video: Option<&VideoFeatures>, tokens: &TokenSequence) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let v = self.view();
        let item = MultiInput {
            video,
            text_ids: &tokens.ids,
            text_mask: &tokens.attention_mask,
        };
        let enc = v.forward_multimodal(&mut g, &[item], None, false)?;
        let r = enc.rows[0];
        let rows: Vec<usize> = (0..r.text_len).map(|j| r.text_row(j)).collect();
        let h = g.gather_rows(enc.hidden, &rows)?;
        let z = v.lm.mlm_logits(&mut g, h)?;
        Ok(g.value(z).clone())
    }

    /// Eval-mode loss of one corrupted caption conditioned on `video`.
    pub fn crossmodal_loss(&self, video: Option<&VideoFeatures>, batch: &MaskedBatch) -> Result<f32> {
        let mut g = Graph::inference();
        let l = self.view().batch_loss(&mut g, &[(video, batch)], None)?;
        g.value(l).item()
    }

    /// Bit-level snapshot of every frozen parameter.
    pub fn frozen_snapshot(&self) -> Vec<(ParamId, Vec<u32>)> {
        self.store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(id, p)| (id, p.tensor.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    pub fn check_frozen(&self, snapshot: &[(ParamId, Vec<u32>)]) -> Result<()> {
        for (id, bits) in snapshot {
            let p = self.store.get(*id);
            if !p.frozen || p.tensor.data().iter().map(|x| x.to_bits()).ne(bits.iter().copied()) {
                return Err(Error::FrozenDrift(p.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub projection: usize,
    pub adapters: usize,
    pub norms: usize,
    pub frozen: usize,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
}

/// One example for the joint forward.
#[derive(Clone, Copy, Debug)]
pub struct MultiInput<'a> {
    pub video: Option<&'a VideoFeatures>,
    pub text_ids: &'a [usize],
    pub text_mask: &'a [u8],
}

impl<'a> MultiInput<'a> {
    /// Drops the padding suffix of the text.
    pub fn trimmed(video: Option<&'a VideoFeatures>, tokens: &'a TokenSequence) -> Self {
        let n = tokens.content_len();
        Self {
            video,
            text_ids: &tokens.ids[..n],
            text_mask: &tokens.attention_mask[..n],
        }
    }
}

pub struct VlmView<'a, T: Scalar> {
    pub lm: LmView<'a, T>,
    pub projection: &'a ProjectionParams,
    pub adapters: Option<&'a [LayerAdapters]>,
    pub feature_dim: usize,
}

impl<T: Scalar> VlmView<'_, T> {
    /// `u·P + b` for every row of `frames` (rows × D_u).
    pub fn project_visual(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let d_u = g.value(frames).last_dim();
        if d_u != self.feature_dim {
            return Err(Error::Shape {
                op: "project_visual",
                lhs: g.value(frames).shape().to_vec(),
                rhs: vec![self.feature_dim],
            });
        }
        let w = g.param(self.lm.store, self.projection.weight);
        let b = g.param(self.lm.store, self.projection.bias);
        let x = g.matmul(frames, w)?;
        g.add_row(x, b)
    }

    /// Packs `[video prompt ‖ text]` per example and encodes with adapters.
    pub fn forward_multimodal(
        &self,
        g: &mut Graph<T>,
        items: &[MultiInput<'_>],
        mut rng: Option<&mut RngStream>,
        record_attention: bool,
    ) -> Result<Encoded> {
        let mut flat = Vec::new();
        let mut n_frames = 0;
        for it in items {
            if let Some(v) = it.video {
                if v.dim != self.feature_dim {
                    return Err(Error::Shape {
                        op: "project_visual",
                        lhs: vec![v.frames(), v.dim],
                        rhs: vec![self.feature_dim],
                    });
                }
                flat.extend(v.features.iter().map(|&x| T::of_f64(x as f64)));
                n_frames += v.frames();
            }
        }
        let content = if n_frames > 0 {
            let u = g.constant(Tensor::new(vec![n_frames, self.feature_dim], flat)?);
            Some(self.project_visual(g, u)?)
        } else {
            None
        };
        let seqs: Vec<SeqInput> = items
            .iter()
            .map(|it| SeqInput {
                video_valid: it.video.map(|v| v.valid.as_slice()),
                text_ids: it.text_ids,
                text_mask: it.text_mask,
            })
            .collect();
        self.lm
            .forward_packed(g, &seqs, content, self.adapters, rng.as_deref_mut(), record_attention)
    }

    /// Mean-over-masks loss for a batch of corrupted captions.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[(Option<&VideoFeatures>, &MaskedBatch)],
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let items: Vec<MultiInput> = batch
            .iter()
            .map(|(v, b)| {
                let s = b.seq_input();
                MultiInput {
                    video: *v,
                    text_ids: s.text_ids,
                    text_mask: s.text_mask,
                }
            })
            .collect();
        let enc = self.forward_multimodal(g, &items, rng, false)?;
        let refs: Vec<&MaskedBatch> = batch.iter().map(|(_, b)| *b).collect();
        self.lm.packed_mlm_loss(g, &enc, &refs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    pub epochs: usize,
    /// Overrides `epochs` when positive.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub corruption: CorruptionRates,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            steps: 0,
            batch_size: 32,
            learning_rate: 1e-3,
            corruption: CorruptionRates::default(),
        }
    }
}

/// A video paired with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionPair {
    pub video: VideoFeatures,
    pub caption: String,
}

/// Trains the non-frozen parameters on visually-conditioned MLM at a
/// constant learning rate, then verifies every frozen weight kept its bits.
/// Returns the per-step training loss.
pub fn train_crossmodal(
    model: &mut FrozenVlm,
    pairs: &[CaptionPair],
    vocab: &Vocabulary,
    config: &CrossModalConfig,
    adam: &AdamConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    adam.validate()?;
    if pairs.is_empty() {
        return Err(Error::DegenerateBatch("no caption pairs".into()));
    }
    let (lr, batch_size) = model.variant.lr_and_batch(config.learning_rate, config.batch_size);
    let batch_size = batch_size.max(1);
    let steps = if config.steps > 0 {
        config.steps
    } else {
        (config.epochs * pairs.len()).div_ceil(batch_size)
    };
    let snapshot = model.frozen_snapshot();
    let seqs: Vec<TokenSequence> = pairs
        .iter()
        .map(|p| encode_sentence(vocab, &p.caption, model.lm_config.max_text_len))
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut shuffle_rng = RngStream::named(seed, "crossmodal.shuffle", 0);
    let schedule = LrSchedule::Constant;
    let step_cfg = |step: usize| AdamConfig {
        learning_rate: lr * schedule.factor(step),
        ..adam.clone()
    };
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut corrupt_rng = RngStream::named(seed, "crossmodal.corrupt", step as u64);
        let mut dropout_rng = RngStream::named(seed, "crossmodal.dropout", step as u64);
        let mut batch: Vec<(usize, MaskedBatch)> = Vec::with_capacity(batch_size);
        let mut skipped = 0usize;
        while batch.len() < batch_size {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            match corrupt_nonempty(&seqs[k], &config.corruption, model.lm_config.vocab_size, &mut corrupt_rng) {
                Ok(b) => batch.push((k, b)),
                Err(Error::SkipSample) => {
                    skipped += 1;
                    if skipped > 100 * pairs.len() {
                        return Err(Error::DegenerateBatch("captions never yield a masked token".into()));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let mut g = Graph::new(GradMode::Trainable);
        let refs: Vec<(Option<&VideoFeatures>, &MaskedBatch)> =
            batch.iter().map(|(k, b)| (Some(&pairs[*k].video), b)).collect();
        let loss = model.view().batch_loss(&mut g, &refs, Some(&mut dropout_rng))?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        let grads = g.backward(loss)?;
        drop(g);
        model.store.accumulate_grads(grads.into_params());
        model.store.fill_missing_grads();
        adam_step(model.store.params_mut(), &step_cfg(step))?;
        losses.push(lv);
    }
    model.check_frozen(&snapshot)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MASK;

    fn small_lm() -> (Vocabulary, BiLm) {
        let vocab = Vocabulary::build(&["a red ball is rolling in the kitchen . a blue cat"], 1).unwrap();
        let cfg = BiLmConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            max_positions: 24,
            prompt_len: 4,
            max_text_len: 12,
            dropout: 0.1,
        };
        let lm = BiLm::new(cfg, 11).unwrap();
        (vocab, lm)
    }

    fn fusion_cfg() -> FusionConfig {
        FusionConfig {
            feature_dim: 6,
            adapter_dim: 0,
        }
    }

    fn video(seed: u64, frames: usize, valid: usize) -> VideoFeatures {
        let mut rng = RngStream::new(seed, 0);
        let feats = (0..frames * 6).map(|_| rng.normal() as f32).collect();
        let v = (0..frames).map(|i| i < valid).collect();
        VideoFeatures::new("v", feats, v, 6).unwrap()
    }

    #[test]
    fn adapter_hand_values() {
        let mut store = ParamStore::<f64>::new();
        let a = AdapterParams {
            w_down: store.add("wd", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap(),
            b_down: store.add("bd", Tensor::vector(vec![0.0])).unwrap(),
            w_up: store.add("wu", Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap(),
            b_up: store.add("bu", Tensor::vector(vec![0.0])).unwrap(),
        };
        let mut g = Graph::<f64>::inference();
        let z = g.constant(Tensor::matrix(2, 1, vec![3.0, -3.0]).unwrap());
        let y = adapter_apply(&mut g, &store, &a, z, 0.1, None).unwrap();
        assert_eq!(g.value(y).data(), &[9.0, -3.0]);
    }

    #[test]
    fn zero_init_adapter_is_identity() {
        let (_, lm) = small_lm();
        let mut store = lm.store.clone();
        let mut rng = RngStream::new(1, 1);
        let a = init_adapter(&mut store, "x", 16, 2, &mut rng).unwrap();
        let mut g = Graph::<f32>::inference();
        let mut zt = Tensor::zeros(&[3, 16]);
        zt.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f32).cos());
        let z = g.constant(zt.clone());
        let y = adapter_apply(&mut g, &store, &a, z, 0.0, None).unwrap();
        assert_eq!(g.value(y), &zt);
    }

    #[test]
    fn projection_identity_and_zero() {
        let (_, lm) = small_lm();
        let fcfg = FusionConfig {
            feature_dim: 16,
            adapter_dim: 0,
        };
        let mut vlm = FrozenVlm::from_lm(lm, fcfg, Variant::Frozen, 3).unwrap();
        let mut eye = Tensor::zeros(&[16, 16]);
        for i in 0..16 {
            eye.data_mut()[i * 16 + i] = 1.0;
        }
        vlm.store.get_mut(vlm.projection.weight).tensor = eye;
        let mut g = Graph::<f32>::inference();
        let mut u = Tensor::zeros(&[2, 16]);
        u.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.5);
        let uv = g.constant(u.clone());
        let p = vlm.view().project_visual(&mut g, uv).unwrap();
        assert_eq!(g.value(p), &u);

        vlm.store.get_mut(vlm.projection.weight).tensor = Tensor::zeros(&[16, 16]);
        let mut g = Graph::<f32>::inference();
        let uv = g.constant(u);
        let p = vlm.view().project_visual(&mut g, uv).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.0));

        let bad = g.constant(Tensor::zeros(&[2, 5]));
        assert!(vlm.view().project_visual(&mut g, bad).is_err());
    }

    #[test]
    fn masked_prompt_matches_text_only() {
        let (vocab, lm) = small_lm();
        let t = vocab.encode("a red [MASK] is rolling", 8);
        let text_only = lm.logits(&t).unwrap();
        let vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Frozen, 3).unwrap();
        let empty = VideoFeatures::empty(4, 6);
        let with_empty = vlm.text_logits(Some(&empty), &t).unwrap();
        let without = vlm.text_logits(None, &t).unwrap();
        assert_eq!(with_empty, without);
        assert_eq!(without, text_only);
        let v = video(5, 4, 4);
        let with_video = vlm.text_logits(Some(&v), &t).unwrap();
        assert_ne!(with_video, without);
    }

    #[test]
    fn variants_set_trainable_groups() {
        for variant in Variant::ALL {
            let (_, lm) = small_lm();
            let vlm = FrozenVlm::from_lm(lm, fusion_cfg(), variant, 2).unwrap();
            let r = vlm.trainable_param_report();
            match variant {
                Variant::Unfrozen => {
                    assert_eq!(r.trainable_fraction, 1.0);
                    assert!(vlm.store.params().iter().all(|p| !p.frozen));
                }
                Variant::FrozenNoAdapters => {
                    assert_eq!(r.adapters, 0);
                    assert_eq!(r.trainable, r.projection + r.norms);
                }
                _ => assert_eq!(r.trainable, r.projection + r.adapters + r.norms),
            }
        }
        assert!(matches!("frozen_adapters".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        assert_eq!("random_lm".parse::<Variant>().unwrap(), Variant::RandomLm);
    }

    #[test]
    fn random_lm_replaces_weights() {
        let (_, lm) = small_lm();
        let tok = lm.store.tensor(lm.params.token_embedding).clone();
        let vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::RandomLm, 2).unwrap();
        assert_ne!(vlm.store.tensor(vlm.lm.token_embedding), &tok);
        assert!(vlm.store.get(vlm.lm.token_embedding).frozen);
    }

    #[test]
    fn zero_bottleneck_rejected() {
        let (_, lm) = small_lm();
        let cfg = FusionConfig {
            feature_dim: 6,
            adapter_dim: 0,
        };
        let lm_cfg = BiLmConfig { hidden: 4, n_heads: 2, ..lm.config.clone() };
        assert!(cfg.validate(&lm_cfg).is_err());
    }

    #[test]
    fn projection_receives_gradient() {
        let (vocab, lm) = small_lm();
        let vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Frozen, 4).unwrap();
        let t = encode_sentence(&vocab, "a red ball is rolling", 12);
        let mut rng = RngStream::new(3, 3);
        let b = corrupt_nonempty(&t, &CorruptionRates::with_rate(0.5), vocab.len(), &mut rng).unwrap();
        let v = video(9, 4, 1);
        let mut g = Graph::new(GradMode::Trainable);
        let l = vlm.view().batch_loss(&mut g, &[(Some(&v), &b)], None).unwrap();
        let grads = g.backward(l).unwrap();
        let gp = grads.param(vlm.projection.weight).unwrap();
        assert!(gp.data().iter().any(|&x| x != 0.0));
        assert!(grads.param(vlm.lm.token_embedding).is_none());
    }

    #[test]
    fn crossmodal_loss_matches_mlm_loss_without_video() {
        let (vocab, lm) = small_lm();
        let t = encode_sentence(&vocab, "a blue cat is rolling", 12);
        let mut rng = RngStream::new(1, 9);
        let b = corrupt_nonempty(&t, &CorruptionRates::with_rate(0.4), vocab.len(), &mut rng).unwrap();
        let direct = lm.mlm_loss(&b, None).unwrap();
        let vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Frozen, 1).unwrap();
        assert_eq!(vlm.crossmodal_loss(None, &b).unwrap(), direct);
        let empty = VideoFeatures::empty(4, 6);
        assert_eq!(vlm.crossmodal_loss(Some(&empty), &b).unwrap(), direct);
        assert!(b.corrupted_ids.contains(&MASK) || b.n_masks() > 0);
    }

    #[test]
    fn training_keeps_frozen_bits_and_fits_pair() {
        let (vocab, lm) = small_lm();
        let mut vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Frozen, 1).unwrap();
        let before = vlm.clone();
        let pairs = vec![CaptionPair {
            video: video(2, 4, 4),
            caption: "a red ball is rolling in the kitchen".into(),
        }];
        let cfg = CrossModalConfig {
            steps: 0,
            epochs: 0,
            batch_size: 4,
            learning_rate: 1e-2,
            corruption: CorruptionRates::with_rate(0.3),
        };
        let l0 = train_crossmodal(&mut vlm, &pairs, &vocab, &cfg, &AdamConfig::default(), 1).unwrap();
        assert!(l0.is_empty());
        for (a, b) in vlm.store.params().iter().zip(before.store.params()) {
            assert_eq!(a.tensor, b.tensor);
        }
        let cfg = CrossModalConfig { steps: 40, ..cfg };
        train_crossmodal(&mut vlm, &pairs, &vocab, &cfg, &AdamConfig::default(), 1).unwrap();
        for (a, b) in vlm.store.params().iter().zip(before.store.params()) {
            if a.frozen {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
    }

    #[test]
    fn overfits_single_pair() {
        let (vocab, lm) = small_lm();
        let mut vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Unfrozen, 1).unwrap();
        let pairs = vec![CaptionPair {
            video: video(2, 4, 4),
            caption: "a red ball is rolling in the kitchen".into(),
        }];
        let cfg = CrossModalConfig {
            steps: 150,
            epochs: 0,
            batch_size: 8,
            learning_rate: 1e-2,
            corruption: CorruptionRates::with_rate(0.3),
        };
        let losses = train_crossmodal(&mut vlm, &pairs, &vocab, &cfg, &AdamConfig::default(), 1).unwrap();
        let head: f32 = losses[..20].iter().sum::<f32>() / 20.0;
        let tail: f32 = losses[130..].iter().sum::<f32>() / 20.0;
        assert!(tail < head * 0.5, "{head} -> {tail}");
    }

    #[test]
    fn drift_is_detected() {
        let (_, lm) = small_lm();
        let mut vlm = FrozenVlm::from_lm(lm, fusion_cfg(), Variant::Frozen, 1).unwrap();
        let snap = vlm.frozen_snapshot();
        let id = vlm.lm.token_embedding;
        vlm.store.get_mut(id).tensor.data_mut()[0] += 1.0;
        assert!(matches!(vlm.check_frozen(&snap), Err(Error::FrozenDrift(_))));
    }
}
