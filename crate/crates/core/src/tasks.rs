//! Downstream tasks in cloze form: prompt rendering, the answer head built
//! from the MLM classifier, zero-shot scoring, finetuning and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradMode, Graph, Var};
use crate::bilm::argmax;
use crate::error::{Error, Result};
use crate::fusion::{FrozenVlm, MultiInput, VideoFeatures, VlmView};
use crate::optim::{adam_step, AdamConfig, LrSchedule};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Vocabulary, MASK, UNK};

pub const BLANK: &str = "____";
pub const YES: &str = "yes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    OpenEnded,
    MultiChoice,
    FillBlank,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::OpenEnded, TaskKind::MultiChoice, TaskKind::FillBlank];

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::OpenEnded => "open",
            TaskKind::MultiChoice => "mc",
            TaskKind::FillBlank => "fib",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "open_ended" => Ok(TaskKind::OpenEnded),
            "mc" | "multi_choice" => Ok(TaskKind::MultiChoice),
            "fib" | "fill_blank" => Ok(TaskKind::FillBlank),
            _ => Err(Error::Config(format!("unknown task kind `{s}` (open, mc, fib)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Index(usize),
    Answer(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    /// Attribute the question is about (color, object, ...).
    pub question_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtitles: Option<String>,
    pub video_id: String,
    pub gold: Gold,
    #[serde(skip)]
    pub video: Option<VideoFeatures>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Prompt(format!("instance {}: {m}", self.id)));
        match self.kind {
            TaskKind::OpenEnded => {
                if self.question.is_none() {
                    return bad("open-ended instance without question");
                }
                if !matches!(self.gold, Gold::Answer(_)) {
                    return bad("open-ended gold must be an answer string");
                }
            }
            TaskKind::MultiChoice => {
                if self.question.is_none() {
                    return bad("multiple-choice instance without question");
                }
                if !(2..=5).contains(&self.candidates.len()) {
                    return bad("multiple-choice needs 2 to 5 candidates");
                }
                match self.gold {
                    Gold::Index(i) if i < self.candidates.len() => {}
                    _ => return bad("multiple-choice gold must index a candidate"),
                }
            }
            TaskKind::FillBlank => {
                let Some(s) = &self.sentence else {
                    return bad("fill-in-blank instance without sentence");
                };
                if s.matches(BLANK).count() != 1 {
                    return bad("fill-in-blank sentence needs exactly one blank");
                }
                if !matches!(self.gold, Gold::Answer(_)) {
                    return bad("fill-in-blank gold must be an answer string");
                }
            }
        }
        Ok(())
    }

    pub fn gold_answer(&self) -> Option<&str> {
        match &self.gold {
            Gold::Answer(a) => Some(a),
            Gold::Index(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptOptions {
    pub use_video: bool,
    pub use_subtitles: bool,
    /// Keep the text after `[MASK]`.
    pub suffix: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            use_video: true,
            use_subtitles: true,
            suffix: true,
        }
    }
}

/// Renders the cloze prompt. For multiple choice, `candidate` selects the
/// candidate to ask about.
pub fn render_prompt(inst: &TaskInstance, candidate: Option<usize>, opts: &PromptOptions) -> Result<String> {
    inst.validate()?;
    let head = match inst.kind {
        TaskKind::OpenEnded => format!("[CLS] Question: {}? Answer: [MASK]", inst.question.as_deref().unwrap_or_default()),
        TaskKind::MultiChoice => {
            let c = candidate.ok_or_else(|| Error::Prompt("multiple-choice prompt needs a candidate".into()))?;
            let cand = inst
                .candidates
                .get(c)
                .ok_or_else(|| Error::Prompt(format!("candidate {c} out of range")))?;
            format!(
                "[CLS] Question: {}? Is it '{cand}'? [MASK]",
                inst.question.as_deref().unwrap_or_default()
            )
        }
        TaskKind::FillBlank => {
            let s = inst.sentence.as_deref().unwrap_or_default();
            format!("[CLS] {}", s.replacen(BLANK, "[MASK]", 1))
        }
    };
    if !opts.suffix {
        return Ok(head);
    }
    Ok(match inst.subtitles.as_deref().filter(|_| opts.use_subtitles) {
        Some(subs) => format!("{head}. Subtitles: {subs} [SEP]"),
        None => format!("{head}. [SEP]"),
    })
}

/// Task answer set with its classifier rows, copied or token-averaged from
/// the MLM head.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocabulary {
    pub answers: Vec<String>,
    pub token_ids: Vec<Vec<usize>>,
    /// N × D.
    pub head: Tensor<f32>,
    pub bias: Vec<f32>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn build(answers: &[String], model: &FrozenVlm, vocab: &Vocabulary) -> Result<Self> {
        if answers.len() < 2 {
            return Err(Error::AnswerVocab("need at least two answers".into()));
        }
        let w = model.store.tensor(model.lm.head_weight);
        let b = model.store.tensor(model.lm.head_bias).data();
        let d = w.last_dim();
        let mut index = HashMap::new();
        let mut token_ids = Vec::with_capacity(answers.len());
        let mut head = Vec::with_capacity(answers.len() * d);
        let mut bias = Vec::with_capacity(answers.len());
        let mut unknown = Vec::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::AnswerVocab(format!("duplicate answer `{a}`")));
            }
            let ids = vocab.tokenize(a);
            if ids.is_empty() || ids.contains(&UNK) {
                unknown.push(a.clone());
                continue;
            }
            let n = ids.len() as f32;
            let mut row = vec![0.0f32; d];
            let mut bsum = 0.0f32;
            for &id in &ids {
                for (r, &x) in row.iter_mut().zip(w.row(id)) {
                    *r += x;
                }
                bsum += b[id];
            }
            head.extend(row.into_iter().map(|x| x / n));
            bias.push(bsum / n);
            token_ids.push(ids);
        }
        if !unknown.is_empty() {
            return Err(Error::AnswerVocab(format!(
                "answers not covered by the vocabulary: {}",
                unknown.join(", ")
            )));
        }
        Ok(Self {
            answers: answers.to_vec(),
            token_ids,
            head: Tensor::new(vec![answers.len(), d], head)?,
            bias,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }
}

/// The `n` most frequent gold answers (ties broken lexicographically).
pub fn top_answers(instances: &[TaskInstance], n: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for inst in instances {
        if let Some(a) = inst.gold_answer() {
            *counts.entry(a).or_default() += 1;
        }
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().take(n).map(|(a, _)| a.to_string()).collect()
}

/// Encodes a rendered prompt and returns the position of its single mask.
pub fn encode_prompt(prompt: &str, vocab: &Vocabulary, max_len: usize) -> Result<(TokenSequence, usize)> {
    let ids = vocab.tokenize(prompt);
    if ids.len() > max_len {
        return Err(Error::Overlength {
            len: ids.len(),
            max: max_len,
        });
    }
    let masks: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect();
    if masks.len() != 1 {
        return Err(Error::Prompt(format!(
            "prompt must contain exactly one [MASK], found {}",
            masks.len()
        )));
    }
    let n = ids.len();
    Ok((
        TokenSequence {
            ids,
            attention_mask: vec![1; n],
        },
        masks[0],
    ))
}

/// A prompt ready for the forward pass.
#[derive(Clone, Debug)]
pub struct PreparedPrompt<'a> {
    pub tokens: TokenSequence,
    pub mask_pos: usize,
    pub video: Option<&'a VideoFeatures>,
}

/// One prompt per open-ended or fill-in-blank instance, or one per
/// candidate for multiple choice.
pub fn prepare<'a>(
    inst: &'a TaskInstance,
    vocab: &Vocabulary,
    max_len: usize,
    opts: &PromptOptions,
) -> Result<Vec<PreparedPrompt<'a>>> {
    let video = if opts.use_video { inst.video.as_ref() } else { None };
    if opts.use_video && video.is_none() {
        return Err(Error::Prompt(format!("instance {} has no video features loaded", inst.id)));
    }
    let candidates: Vec<Option<usize>> = match inst.kind {
        TaskKind::MultiChoice => (0..inst.candidates.len()).map(Some).collect(),
        _ => vec![None],
    };
    candidates
        .into_iter()
        .map(|c| {
            let p = render_prompt(inst, c, opts)?;
            let (tokens, mask_pos) = encode_prompt(&p, vocab, max_len)?;
            Ok(PreparedPrompt {
                tokens,
                mask_pos,
                video,
            })
        })
        .collect()
}

/// Hidden states at the mask position of each prompt.
fn mask_hidden(view: &VlmView<'_, f32>, g: &mut Graph<f32>, prompts: &[PreparedPrompt<'_>], rng: Option<&mut RngStream>) -> Result<Var> {
    let items: Vec<MultiInput> = prompts
        .iter()
        .map(|p| MultiInput {
            video: p.video,
            text_ids: &p.tokens.ids,
            text_mask: &p.tokens.attention_mask,
        })
        .collect();
    let enc = view.forward_multimodal(g, &items, rng, false)?;
    let rows: Vec<usize> = enc.rows.iter().zip(prompts).map(|(r, p)| r.text_row(p.mask_pos)).collect();
    g.gather_rows(enc.hidden, &rows)
}

/// Answer-head scores (prompts × N) at the mask positions.
fn answer_scores(
    view: &VlmView<'_, f32>,
    g: &mut Graph<f32>,
    prompts: &[PreparedPrompt<'_>],
    answers: &AnswerVocabulary,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    let h = mask_hidden(view, g, prompts, rng)?;
    let w = g.constant(answers.head.clone());
    let b = g.constant(Tensor::vector(answers.bias.clone()));
    let z = g.matmul_nt(h, w)?;
    g.add_row(z, b)
}

/// Full-vocabulary "yes" logit at the mask position of each prompt.
fn yes_logits(
    view: &VlmView<'_, f32>,
    g: &mut Graph<f32>,
    prompts: &[PreparedPrompt<'_>],
    yes: usize,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    let h = mask_hidden(view, g, prompts, rng)?;
    let z = view.lm.mlm_logits(g, h)?;
    let picks: Vec<(usize, usize)> = (0..prompts.len()).map(|i| (i, yes)).collect();
    g.pick(z, &picks)
}

fn yes_id(vocab: &Vocabulary) -> Result<usize> {
    vocab
        .id(YES)
        .ok_or_else(|| Error::Vocab(format!("`{YES}` is not in the vocabulary")))
}

/// Ranks the answer vocabulary for an open-ended or fill-in-blank instance;
/// ties go to the lower answer index.
pub fn answer_openended(
    inst: &TaskInstance,
    model: &FrozenVlm,
    answers: &AnswerVocabulary,
    vocab: &Vocabulary,
    opts: &PromptOptions,
    top_k: usize,
) -> Result<Vec<(String, f32)>> {
    if inst.kind == TaskKind::MultiChoice {
        return Err(Error::Prompt("multiple-choice instance given to the open-ended scorer".into()));
    }
    let prompts = prepare(inst, vocab, model.lm_config.max_text_len, opts)?;
    let mut g = Graph::inference();
    let s = answer_scores(&model.view(), &mut g, &prompts, answers, None)?;
    let scores = g.value(s).row(0).to_vec();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(top_k)
        .map(|i| (answers.answers[i].clone(), scores[i]))
        .collect())
}

/// Fill-in-blank is open-ended scoring of the blank prompt.
pub fn fill_blank(
    inst: &TaskInstance,
    model: &FrozenVlm,
    answers: &AnswerVocabulary,
    vocab: &Vocabulary,
    opts: &PromptOptions,
) -> Result<(String, f32)> {
    if inst.kind != TaskKind::FillBlank {
        return Err(Error::Prompt("not a fill-in-blank instance".into()));
    }
    answer_openended(inst, model, answers, vocab, opts, 1)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::AnswerVocab("empty answer vocabulary".into()))
}

/// Picks the candidate with the highest "yes" logit; ties go to the lowest
/// index.
pub fn answer_multichoice(
    inst: &TaskInstance,
    model: &FrozenVlm,
    vocab: &Vocabulary,
    opts: &PromptOptions,
) -> Result<(usize, Vec<f32>)> {
    if inst.kind != TaskKind::MultiChoice || inst.candidates.is_empty() {
        return Err(Error::Prompt("multiple-choice scoring needs candidates".into()));
    }
    let yes = yes_id(vocab)?;
    let prompts = prepare(inst, vocab, model.lm_config.max_text_len, opts)?;
    let mut g = Graph::inference();
    let y = yes_logits(&model.view(), &mut g, &prompts, yes, None)?;
    let logits = g.value(y).data().to_vec();
    Ok((argmax(&logits), logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question_type: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// question type → (accuracy, count).
    pub per_type: BTreeMap<String, (f64, usize)>,
    pub predictions: Vec<Prediction>,
}

/// Top-1 accuracy. Open-ended golds outside the answer vocabulary count as
/// wrong.
pub fn evaluate(
    data: &[TaskInstance],
    model: &FrozenVlm,
    answers: &AnswerVocabulary,
    vocab: &Vocabulary,
    opts: &PromptOptions,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::DegenerateBatch("empty evaluation set".into()));
    }
    let view = model.view();
    let max_len = model.lm_config.max_text_len;
    let yes = if data.iter().any(|i| i.kind == TaskKind::MultiChoice) {
        Some(yes_id(vocab)?)
    } else {
        None
    };
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let mut prompts = Vec::new();
        let mut spans = Vec::with_capacity(chunk.len());
        for inst in chunk {
            let p = prepare(inst, vocab, max_len, opts)?;
            spans.push((prompts.len(), p.len()));
            prompts.extend(p);
        }
        let mut g = Graph::inference();
        let open_scores = if chunk.iter().all(|i| i.kind != TaskKind::MultiChoice) {
            Some(answer_scores(&view, &mut g, &prompts, answers, None)?)
        } else {
            None
        };
        let mc_scores = match (open_scores, yes) {
            (None, Some(y)) => Some(yes_logits(&view, &mut g, &prompts, y, None)?),
            _ => None,
        };
        for (inst, &(start, len)) in chunk.iter().zip(&spans) {
            let (predicted, correct) = match inst.kind {
                TaskKind::MultiChoice => {
                    let v = mc_scores.ok_or_else(|| {
                        Error::Prompt("mixed task kinds in one evaluation chunk".into())
                    })?;
                    let y = &g.value(v).data()[start..start + len];
                    let k = argmax(y);
                    (inst.candidates[k].clone(), inst.gold == Gold::Index(k))
                }
                _ => {
                    let v = open_scores.ok_or_else(|| {
                        Error::Prompt("mixed task kinds in one evaluation chunk".into())
                    })?;
                    let k = argmax(g.value(v).row(start));
                    let pred = answers.answers[k].clone();
                    let ok = inst.gold_answer().is_some_and(|a| answers.index(a) == Some(k));
                    (pred, ok)
                }
            };
            predictions.push(Prediction {
                id: inst.id.clone(),
                question_type: inst.question_type.clone(),
                predicted,
                correct,
            });
        }
    }
    let correct = predictions.iter().filter(|p| p.correct).count();
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in &predictions {
        let e = per.entry(p.question_type.clone()).or_default();
        e.0 += p.correct as usize;
        e.1 += 1;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        per_type: per
            .into_iter()
            .map(|(k, (c, n))| (k, (c as f64 / n as f64, n)))
            .collect(),
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_fraction: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
        }
    }
}

/// Seeded shuffle, then the first `ceil(fraction · n)` instances.
pub fn take_fraction(data: &[TaskInstance], fraction: f64, seed: u64) -> Result<Vec<TaskInstance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    RngStream::named(seed, "finetune.fraction", 0).shuffle(&mut order);
    let n = ((fraction * data.len() as f64).ceil() as usize).min(data.len());
    Ok(order[..n].iter().map(|&i| data[i].clone()).collect())
}

/// Supervised training of the model's trainable parameters on `train`
/// (already subsampled). The answer head is never updated. Returns the
/// per-step loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut FrozenVlm,
    train: &[TaskInstance],
    answers: &AnswerVocabulary,
    vocab: &Vocabulary,
    config: &FinetuneConfig,
    opts: &PromptOptions,
    adam: &AdamConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    adam.validate()?;
    let usable: Vec<&TaskInstance> = train
        .iter()
        .filter(|i| match i.kind {
            TaskKind::MultiChoice => true,
            _ => i.gold_answer().and_then(|a| answers.index(a)).is_some(),
        })
        .collect();
    if usable.is_empty() || config.epochs == 0 {
        return Ok(Vec::new());
    }
    let yes = if usable.iter().any(|i| i.kind == TaskKind::MultiChoice) {
        Some(yes_id(vocab)?)
    } else {
        None
    };
    let (lr, batch_size) = model.variant.lr_and_batch(config.learning_rate, config.batch_size);
    let batch_size = batch_size.max(1);
    let steps = (config.epochs * usable.len()).div_ceil(batch_size);
    let schedule = LrSchedule::WarmupLinear {
        total_steps: steps,
        warmup_fraction: config.warmup_fraction,
    };
    let snapshot = model.frozen_snapshot();
    let head_before = answers.clone();
    let max_len = model.lm_config.max_text_len;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut cursor = order.len();
    let mut shuffle_rng = RngStream::named(seed, "finetune.shuffle", 0);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut dropout_rng = RngStream::named(seed, "finetune.dropout", step as u64);
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size.min(usable.len()) {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(usable[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::new(GradMode::Trainable);
        let view = model.view();
        let mut open_prompts = Vec::new();
        let mut open_targets = Vec::new();
        let mut mc_prompts = Vec::new();
        let mut mc_labels = Vec::new();
        let mut mc_weights = Vec::new();
        let n_mc = batch.iter().filter(|i| i.kind == TaskKind::MultiChoice).count();
        for inst in &batch {
            let ps = prepare(inst, vocab, max_len, opts)?;
            match inst.kind {
                TaskKind::MultiChoice => {
                    let Gold::Index(gi) = inst.gold else { unreachable!("validated") };
                    let w = 1.0 / (ps.len() as f64 * n_mc as f64);
                    for (c, p) in ps.into_iter().enumerate() {
                        mc_labels.push(if c == gi { 1.0 } else { 0.0 });
                        mc_weights.push(w);
                        mc_prompts.push(p);
                    }
                }
                _ => {
                    let a = inst.gold_answer().and_then(|a| answers.index(a)).expect("filtered");
                    open_targets.push(a);
                    open_prompts.extend(ps);
                }
            }
        }
        let n_open = open_prompts.len();
        let mut parts = Vec::new();
        if n_open > 0 {
            let s = answer_scores(&view, &mut g, &open_prompts, answers, Some(&mut dropout_rng))?;
            let w = vec![1.0 / n_open as f64; n_open];
            parts.push((g.cross_entropy_weighted(s, &open_targets, &w)?, n_open));
        }
        if n_mc > 0 {
            let y = yes_logits(&view, &mut g, &mc_prompts, yes.expect("mc present"), Some(&mut dropout_rng))?;
            parts.push((g.bce_with_logits(y, &mc_labels, &mc_weights)?, n_mc));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut loss = None;
        for (l, n) in parts {
            let scaled = g.scale(l, n as f64 / total as f64);
            loss = Some(match loss {
                None => scaled,
                Some(acc) => g.add(acc, scaled)?,
            });
        }
        let loss = loss.expect("non-empty batch");
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        let grads = g.backward(loss)?;
        drop(g);
        model.store.accumulate_grads(grads.into_params());
        model.store.fill_missing_grads();
        let cfg = AdamConfig {
            learning_rate: lr * schedule.factor(step),
            ..adam.clone()
        };
        adam_step(model.store.params_mut(), &cfg)?;
        losses.push(lv);
    }
    model.check_frozen(&snapshot)?;
    debug_assert_eq!(&head_before, answers);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilm::{BiLm, BiLmConfig};
    use crate::fusion::{FusionConfig, Variant};
    use crate::tokenizer::normalize;

    fn open(q: &str, subs: Option<&str>) -> TaskInstance {
        TaskInstance {
            id: "t".into(),
            kind: TaskKind::OpenEnded,
            question_type: "color".into(),
            question: Some(q.into()),
            candidates: vec![],
            sentence: None,
            subtitles: subs.map(String::from),
            video_id: "v".into(),
            gold: Gold::Answer("red".into()),
            video: None,
        }
    }

    fn mc(cands: &[&str], gold: usize) -> TaskInstance {
        TaskInstance {
            kind: TaskKind::MultiChoice,
            candidates: cands.iter().map(|s| s.to_string()).collect(),
            gold: Gold::Index(gold),
            ..open("what color is the ball", None)
        }
    }

    fn fib(s: &str) -> TaskInstance {
        TaskInstance {
            kind: TaskKind::FillBlank,
            question: None,
            sentence: Some(s.into()),
            question_type: "object".into(),
            gold: Gold::Answer("ball".into()),
            ..open("", None)
        }
    }

    fn tiny() -> (Vocabulary, FrozenVlm) {
        let vocab = Vocabulary::build(
            &["question : what color is the ball ? answer : red . is it ' blue ' ? yes no . living room subtitles the narrator says"],
            1,
        )
        .unwrap();
        let cfg = BiLmConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 32,
            max_positions: 40,
            prompt_len: 4,
            max_text_len: 32,
            dropout: 0.1,
        };
        let lm = BiLm::new(cfg, 3).unwrap();
        let fusion = FusionConfig {
            feature_dim: 5,
            adapter_dim: 0,
        };
        (vocab, FrozenVlm::from_lm(lm, fusion, Variant::Frozen, 3).unwrap())
    }

    #[test]
    fn open_prompt_forms() {
        let o = PromptOptions::default();
        let p = render_prompt(&open("what color is the ball", None), None, &o).unwrap();
        assert_eq!(
            normalize(&p),
            "[CLS] question : what color is the ball ? answer : [MASK] . [SEP]"
        );
        let p = render_prompt(&open("what color is the ball", Some("the narrator says the color is red")), None, &o).unwrap();
        assert_eq!(
            p,
            "[CLS] Question: what color is the ball? Answer: [MASK]. Subtitles: the narrator says the color is red [SEP]"
        );
        let no_subs = PromptOptions {
            use_subtitles: false,
            ..o
        };
        let p = render_prompt(&open("what color is the ball", Some("x")), None, &no_subs).unwrap();
        assert!(p.ends_with("[MASK]. [SEP]"));
        let bare = PromptOptions { suffix: false, ..o };
        let p = render_prompt(&open("what color is the ball", None), None, &bare).unwrap();
        assert!(normalize(&p).ends_with("answer : [MASK]"));
    }

    #[test]
    fn mc_and_fib_prompts() {
        let o = PromptOptions::default();
        let m = mc(&["blue", "red"], 1);
        let p = normalize(&render_prompt(&m, Some(1), &o).unwrap());
        assert!(p.contains("is it ' red ' ? [MASK]"), "{p}");
        assert!(render_prompt(&m, None, &o).is_err());
        let f = fib("the ____ is rolling");
        let p = render_prompt(&f, None, &o).unwrap();
        assert_eq!(p.matches("[MASK]").count(), 1);
        assert!(render_prompt(&fib("the ____ is ____"), None, &o).is_err());
    }

    #[test]
    fn answer_head_rows() {
        let (vocab, m) = tiny();
        let answers: Vec<String> = ["red", "living room", "blue"].iter().map(|s| s.to_string()).collect();
        let av = AnswerVocabulary::build(&answers, &m, &vocab).unwrap();
        let w = m.store.tensor(m.lm.head_weight);
        let b = m.store.tensor(m.lm.head_bias).data();
        let red = vocab.id("red").unwrap();
        assert_eq!(av.head.row(0), w.row(red));
        assert_eq!(av.bias[0], b[red]);
        let (l, r) = (vocab.id("living").unwrap(), vocab.id("room").unwrap());
        for c in 0..16 {
            let mean = (w.row(l)[c] as f64 + w.row(r)[c] as f64) / 2.0;
            assert!((av.head.row(1)[c] as f64 - mean).abs() <= 1e-7);
        }
        let dup: Vec<String> = vec!["red".into(), "red".into()];
        assert!(AnswerVocabulary::build(&dup, &m, &vocab).is_err());
        let unk: Vec<String> = vec!["red".into(), "zebra".into()];
        let err = AnswerVocabulary::build(&unk, &m, &vocab).unwrap_err();
        assert!(err.to_string().contains("zebra"));
    }

    #[test]
    fn open_scores_equal_mlm_logits_for_single_tokens() {
        let (vocab, m) = tiny();
        let answers: Vec<String> = ["red", "blue", "ball", "yes"].iter().map(|s| s.to_string()).collect();
        let av = AnswerVocabulary::build(&answers, &m, &vocab).unwrap();
        let o = PromptOptions {
            use_video: false,
            ..Default::default()
        };
        let inst = open("what color is the ball", None);
        let ranked = answer_openended(&inst, &m, &av, &vocab, &o, 4).unwrap();
        let p = render_prompt(&inst, None, &o).unwrap();
        let (t, pos) = encode_prompt(&p, &vocab, 32).unwrap();
        let logits = m.text_logits(None, &t).unwrap();
        for (a, s) in ranked {
            assert_eq!(s, logits.row(pos)[vocab.id(&a).unwrap()], "{a}");
        }
    }

    #[test]
    fn multichoice_ties_and_brute_force() {
        let (vocab, m) = tiny();
        let o = PromptOptions {
            use_video: false,
            ..Default::default()
        };
        let same = mc(&["red", "red", "red"], 2);
        let (k, y) = answer_multichoice(&same, &m, &vocab, &o).unwrap();
        assert_eq!(k, 0);
        assert_eq!(y[0], y[1]);
        let inst = mc(&["red", "blue", "ball", "room"], 1);
        let (k, y) = answer_multichoice(&inst, &m, &vocab, &o).unwrap();
        let yes = vocab.id("yes").unwrap();
        let brute: Vec<f32> = (0..4)
            .map(|c| {
                let p = render_prompt(&inst, Some(c), &o).unwrap();
                let (t, pos) = encode_prompt(&p, &vocab, 32).unwrap();
                m.text_logits(None, &t).unwrap().row(pos)[yes]
            })
            .collect();
        assert_eq!(y, brute);
        assert_eq!(k, argmax(&brute));
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[1.0f32, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.2f32, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[0.5f32, 0.1, 0.5]), 0);
    }

    #[test]
    fn evaluation_counts_oov_gold_as_wrong() {
        let (vocab, m) = tiny();
        let answers: Vec<String> = ["red", "blue"].iter().map(|s| s.to_string()).collect();
        let av = AnswerVocabulary::build(&answers, &m, &vocab).unwrap();
        let o = PromptOptions {
            use_video: false,
            ..Default::default()
        };
        let mut zebra = open("what color is the ball", None);
        zebra.gold = Gold::Answer("zebra".into());
        let r = evaluate(&[zebra.clone(), zebra], &m, &av, &vocab, &o).unwrap();
        assert_eq!(r.correct, 0);
        assert_eq!(r.accuracy, 0.0);
        let insts = vec![open("what color is the ball", None); 4];
        let r = evaluate(&insts, &m, &av, &vocab, &o).unwrap();
        assert!(r.accuracy == 0.0 || r.accuracy == 1.0);
        assert_eq!(r.per_type["color"].1, 4);
    }

    #[test]
    fn fraction_prefix() {
        let data: Vec<TaskInstance> = (0..200)
            .map(|i| TaskInstance {
                id: i.to_string(),
                ..open("what color is the ball", None)
            })
            .collect();
        assert_eq!(take_fraction(&data, 1.0, 1).unwrap().len(), 200);
        let a = take_fraction(&data, 0.01, 1).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, take_fraction(&data, 0.01, 1).unwrap());
        assert!(take_fraction(&data, 0.0, 1).is_err());
    }

    #[test]
    fn finetune_trains_and_keeps_head() {
        let (vocab, mut m) = tiny();
        let answers: Vec<String> = ["red", "blue"].iter().map(|s| s.to_string()).collect();
        let av = AnswerVocabulary::build(&answers, &m, &vocab).unwrap();
        let o = PromptOptions {
            use_video: false,
            ..Default::default()
        };
        let data = vec![open("what color is the ball", None); 8];
        let before = m.clone();
        let zero = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(finetune(&mut m, &data, &av, &vocab, &zero, &o, &AdamConfig::default(), 1).unwrap().is_empty());
        for (a, b) in m.store.params().iter().zip(before.store.params()) {
            assert_eq!(a.tensor, b.tensor);
        }
        let cfg = FinetuneConfig {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let losses = finetune(&mut m, &data, &av, &vocab, &cfg, &o, &AdamConfig::default(), 1).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let r = evaluate(&data, &m, &av, &vocab, &o).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let mc_data = vec![mc(&["blue", "red"], 1); 4];
        let losses = finetune(&mut m, &mc_data, &av, &vocab, &cfg, &o, &AdamConfig::default(), 2).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
