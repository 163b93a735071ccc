//! The ablation grid: variant × supervision fraction × modality flags, one
//! CSV row per cell.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilm::BiLm;
use crate::error::{Error, Result};
use crate::fusion::{train_crossmodal, CaptionPair, FrozenVlm, Variant};
use crate::tasks::{evaluate, finetune, take_fraction, top_answers, AnswerVocabulary, PromptOptions, TaskInstance};
use crate::tokenizer::Vocabulary;

use super::config::RunConfig;

/// Column order of the grid CSV.
pub const CSV_COLUMNS: [&str; 10] = [
    "variant",
    "task",
    "fraction",
    "use_video",
    "use_subtitles",
    "n_train",
    "correct",
    "total",
    "accuracy",
    "status",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub use_video: bool,
    pub use_subtitles: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    pub fractions: Vec<f64>,
    pub modalities: Vec<Modality>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let m = |use_video, use_subtitles| Modality {
            use_video,
            use_subtitles,
        };
        Self {
            variants: Variant::ALL.to_vec(),
            fractions: vec![0.0, 0.01, 0.1, 1.0],
            modalities: vec![m(true, true), m(true, false), m(false, true), m(false, false)],
        }
    }
}

impl GridSpec {
    /// Zero-shot only, full modality.
    pub fn zero_shot() -> Self {
        Self {
            fractions: vec![0.0],
            modalities: vec![Modality {
                use_video: true,
                use_subtitles: true,
            }],
            ..Self::default()
        }
    }

    pub fn n_cells(&self) -> usize {
        self.variants.len() * self.fractions.len() * self.modalities.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub variant: Variant,
    pub task: String,
    pub fraction: f64,
    pub modality: Modality,
    pub n_train: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
    /// `ok` or the error that stopped the cell.
    pub status: String,
}

impl GridRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.variant.to_string(),
            self.task.clone(),
            self.fraction.to_string(),
            self.modality.use_video.to_string(),
            self.modality.use_subtitles.to_string(),
            self.n_train.to_string(),
            self.correct.to_string(),
            self.total.to_string(),
            self.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
            self.status.clone(),
        ]
    }
}

/// Inputs shared by every cell.
pub struct GridInputs<'a> {
    pub lm: &'a BiLm,
    pub vocab: &'a Vocabulary,
    pub pairs: &'a [CaptionPair],
    pub train: &'a [TaskInstance],
    pub test: &'a [TaskInstance],
}

/// Runs every cell. Variants run in parallel; within a variant, cross-modal
/// training is shared by all fractions and finetuning by all modalities.
/// Rows come back in grid order whatever the scheduling.
pub fn run_grid(cfg: &RunConfig, spec: &GridSpec, inputs: &GridInputs<'_>) -> Vec<GridRow> {
    spec.variants
        .par_iter()
        .map(|&v| variant_rows(cfg, spec, inputs, v))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Cross-modal training for one variant, as the CLI runs it.
pub fn crossmodal_model(cfg: &RunConfig, lm: &BiLm, vocab: &Vocabulary, pairs: &[CaptionPair], variant: Variant) -> Result<(FrozenVlm, Vec<f32>)> {
    let mut model = FrozenVlm::from_lm(lm.clone(), cfg.fusion.clone(), variant, cfg.seed)?;
    let losses = train_crossmodal(&mut model, pairs, vocab, &cfg.crossmodal, &cfg.adam, cfg.seed)?;
    Ok((model, losses))
}

fn variant_rows(cfg: &RunConfig, spec: &GridSpec, inputs: &GridInputs<'_>, variant: Variant) -> Vec<GridRow> {
    let task = cfg.task.short_name().to_string();
    let blank = |fraction: f64, modality: Modality, status: String| GridRow {
        variant,
        task: task.clone(),
        fraction,
        modality,
        n_train: 0,
        correct: 0,
        total: 0,
        accuracy: None,
        status,
    };
    let base = crossmodal_model(cfg, inputs.lm, inputs.vocab, inputs.pairs, variant).and_then(|(m, _)| {
        let answers = AnswerVocabulary::build(&top_answers(inputs.train, cfg.answer_vocab_size), &m, inputs.vocab)?;
        Ok((m, answers))
    });
    let mut rows = Vec::with_capacity(spec.fractions.len() * spec.modalities.len());
    for &fraction in &spec.fractions {
        let tuned = base.as_ref().map_err(Error::to_string).and_then(|(m, answers)| {
            if fraction == 0.0 {
                return Ok((m.clone(), 0));
            }
            let subset = take_fraction(inputs.train, fraction, cfg.seed).map_err(|e| e.to_string())?;
            let mut m = m.clone();
            if !subset.is_empty() {
                finetune(&mut m, &subset, answers, inputs.vocab, &cfg.finetune, &cfg.prompt, &cfg.adam, cfg.seed)
                    .map_err(|e| e.to_string())?;
            }
            Ok((m, subset.len()))
        });
        for &modality in &spec.modalities {
            let row = match (&tuned, &base) {
                (Ok((m, n_train)), Ok((_, answers))) => {
                    let opts = PromptOptions {
                        use_video: modality.use_video,
                        use_subtitles: modality.use_subtitles,
                        ..cfg.prompt
                    };
                    match evaluate(inputs.test, m, answers, inputs.vocab, &opts) {
                        Ok(r) => GridRow {
                            n_train: *n_train,
                            correct: r.correct,
                            total: r.total,
                            accuracy: Some(r.accuracy),
                            status: "ok".into(),
                            ..blank(fraction, modality, String::new())
                        },
                        Err(e) => blank(fraction, modality, e.to_string()),
                    }
                }
                (Err(e), _) => blank(fraction, modality, e.clone()),
                (_, Err(e)) => blank(fraction, modality, e.to_string()),
            };
            rows.push(row);
        }
    }
    rows
}

pub fn to_csv(rows: &[GridRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(err)?;
    for r in rows {
        w.write_record(r.record()).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows)?)?;
    Ok(())
}

/// Accuracy of the cell matching all keys, if it ran.
pub fn lookup(rows: &[GridRow], variant: Variant, fraction: f64, modality: Modality) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.fraction == fraction && r.modality == modality)
        .and_then(|r| r.accuracy)
}

/// How far above the marginal floor a cell may sit and still count as
/// "near" it.
pub const NEAR_FLOOR: f64 = 0.05;

/// A named directional check over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Ordering {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

/// The orderings the grid is expected to reproduce. Checks whose cells are
/// missing are reported as not holding.
pub fn orderings(rows: &[GridRow], floor: f64) -> Vec<Ordering> {
    let full = Modality {
        use_video: true,
        use_subtitles: true,
    };
    let no_video = Modality {
        use_video: false,
        use_subtitles: true,
    };
    let no_subs = Modality {
        use_video: true,
        use_subtitles: false,
    };
    let zs = |v: Variant, m: Modality| lookup(rows, v, 0.0, m);
    let mut out = Vec::new();
    let mut push = |name: &str, vals: Option<(bool, String)>| {
        let (holds, detail) = vals.unwrap_or((false, "cells missing".into()));
        out.push(Ordering {
            name: name.into(),
            holds,
            detail,
        });
    };
    push(
        "video gain >= 20 points over no-video",
        zs(Variant::Frozen, full).zip(zs(Variant::Frozen, no_video)).map(|(a, b)| {
            (a - b >= 0.20, format!("{a:.4} vs {b:.4}"))
        }),
    );
    push(
        "zero-shot above marginal floor",
        zs(Variant::Frozen, full).map(|a| (a > floor, format!("{a:.4} vs floor {floor:.4}"))),
    );
    let zero: Vec<Option<f64>> = Variant::ALL.iter().map(|&v| zs(v, full)).collect();
    push(
        "random_lm below unfrozen and near floor",
        zero[0].zip(zero[1]).map(|(r, u)| {
            (r < u && r <= floor + NEAR_FLOOR, format!("{r:.4} vs {u:.4}, floor {floor:.4}"))
        }),
    );
    push(
        "frozen with adapters within 2 points of best",
        zero.iter().copied().collect::<Option<Vec<f64>>>().map(|z| {
            let best = z.iter().cloned().fold(f64::MIN, f64::max);
            (z[3] >= best - 0.02, format!("{:.4} vs best {best:.4}", z[3]))
        }),
    );
    push(
        "subtitles gain >= 10 points",
        zs(Variant::Frozen, full).zip(zs(Variant::Frozen, no_subs)).map(|(a, b)| {
            (a - b >= 0.10, format!("{a:.4} vs {b:.4}"))
        }),
    );
    let curve: Option<Vec<f64>> = [0.0, 0.01, 0.1, 1.0]
        .iter()
        .map(|&f| lookup(rows, Variant::Frozen, f, full))
        .collect();
    push(
        "few-shot non-decreasing with total gain >= 10 points",
        curve.map(|c| {
            let mono = c.windows(2).all(|w| w[1] >= w[0]);
            let gain = c[3] - c[0];
            (
                mono && gain >= 0.10,
                c.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" -> "),
            )
        }),
    );
    out
}
