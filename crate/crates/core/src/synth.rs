//! Deterministic synthetic world: scenes with closed-lexicon attributes,
//! additive per-frame visual features, a text corpus, video-caption pairs
//! and QA sets for the three task formats.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CaptionPair, VideoFeatures};
use crate::rng::RngStream;
use crate::tasks::{Gold, TaskInstance, TaskKind, BLANK};

pub const OBJECTS: [&str; 12] = [
    "ball", "cat", "dog", "car", "bird", "horse", "robot", "boat", "kite", "drum", "lamp", "chair",
];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"];
pub const ACTIONS: [&str; 6] = ["rolling", "jumping", "spinning", "sleeping", "falling", "sliding"];
pub const LOCATIONS: [&str; 6] = ["kitchen", "garden", "park", "beach", "living room", "swimming pool"];
pub const COUNTS: [&str; 5] = ["one", "two", "three", "four", "five"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    Object,
    Action,
    Location,
    Count,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Color,
        Attribute::Object,
        Attribute::Action,
        Attribute::Location,
        Attribute::Count,
    ];
    /// Attributes named in a caption.
    pub const CAPTIONED: [Attribute; 4] = [Attribute::Color, Attribute::Object, Attribute::Action, Attribute::Location];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Object => "object",
            Attribute::Action => "action",
            Attribute::Location => "location",
            Attribute::Count => "count",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Attribute::Color => &COLORS,
            Attribute::Object => &OBJECTS,
            Attribute::Action => &ACTIONS,
            Attribute::Location => &LOCATIONS,
            Attribute::Count => &COUNTS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object: usize,
    pub color: usize,
    pub action: usize,
    pub location: usize,
    /// 1..=5.
    pub count: usize,
    pub scene_id: u64,
}

impl SceneSpec {
    pub fn index(&self, a: Attribute) -> usize {
        match a {
            Attribute::Color => self.color,
            Attribute::Object => self.object,
            Attribute::Action => self.action,
            Attribute::Location => self.location,
            Attribute::Count => self.count - 1,
        }
    }

    pub fn value(&self, a: Attribute) -> &'static str {
        a.values()[self.index(a)]
    }

    fn with(mut self, a: Attribute, idx: usize) -> Self {
        match a {
            Attribute::Color => self.color = idx,
            Attribute::Object => self.object = idx,
            Attribute::Action => self.action = idx,
            Attribute::Location => self.location = idx,
            Attribute::Count => self.count = idx + 1,
        }
        self
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} is {} in the {}",
            COLORS[self.color], OBJECTS[self.object], ACTIONS[self.action], LOCATIONS[self.location]
        )
    }

    /// Caption with one attribute replaced by the blank marker.
    pub fn caption_with_blank(&self, a: Attribute) -> String {
        let word = |b: Attribute| if a == b { BLANK } else { self.value(b) };
        format!(
            "a {} {} is {} in the {}",
            word(Attribute::Color),
            word(Attribute::Object),
            word(Attribute::Action),
            word(Attribute::Location)
        )
    }

    pub fn question(&self, a: Attribute) -> String {
        match a {
            Attribute::Color => format!("what color is the {}", OBJECTS[self.object]),
            Attribute::Object => format!("what is {} in the {}", ACTIONS[self.action], LOCATIONS[self.location]),
            Attribute::Action => format!("what is the {} doing", OBJECTS[self.object]),
            Attribute::Location => format!("where is the {}", OBJECTS[self.object]),
            Attribute::Count => format!("how many {} are there", OBJECTS[self.object]),
        }
    }

    pub fn count_sentence(&self) -> String {
        format!("there are {} {}", COUNTS[self.count - 1], OBJECTS[self.object])
    }
}

pub fn hint(a: Attribute, value: &str) -> String {
    format!("the narrator says the {} is {}", a.name(), value)
}

/// Inverse of [`SceneSpec::caption`] (count and id are not recoverable).
pub fn parse_caption(caption: &str) -> Option<(usize, usize, usize, usize)> {
    let rest = caption.strip_prefix("a ")?;
    let (color, rest) = rest.split_once(' ')?;
    let (object, rest) = rest.split_once(" is ")?;
    let (action, location) = rest.split_once(" in the ")?;
    Some((
        COLORS.iter().position(|&c| c == color)?,
        OBJECTS.iter().position(|&o| o == object)?,
        ACTIONS.iter().position(|&a| a == action)?,
        LOCATIONS.iter().position(|&l| l == location)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_text_sentences: usize,
    pub n_pairs: usize,
    pub n_qa_train: usize,
    pub n_qa_test: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    pub heldout_combination_fraction: f64,
    pub subtitle_probability: f64,
    /// Every attribute value appears at least this often in the corpus.
    pub min_value_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_text_sentences: 20_000,
            n_pairs: 5_000,
            n_qa_train: 2_000,
            n_qa_test: 1_000,
            feature_dim: 32,
            frames: 10,
            noise_sigma: 0.5,
            heldout_combination_fraction: 0.1,
            subtitle_probability: 0.3,
            min_value_count: 20,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.frames == 0 {
            return Err(Error::Config("feature_dim and frames must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=0.5).contains(&self.heldout_combination_fraction) {
            return Err(Error::Config("heldout_combination_fraction outside [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.subtitle_probability) {
            return Err(Error::Config("subtitle_probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Disjoint scene-id ranges per use.
const PAIR_IDS: u64 = 0;
const QA_TRAIN_IDS: u64 = 10_000_000;
const QA_TEST_IDS: u64 = 20_000_000;
const TEXT_IDS: u64 = 30_000_000;
const KIND_STRIDE: u64 = 1_000_000;

/// The generator: fixed attribute embeddings plus the heldout combinations.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    embeddings: BTreeMap<(Attribute, usize), Vec<f64>>,
    count_unit: Vec<f64>,
    heldout: BTreeSet<(usize, usize)>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::named(config.seed, "world.embeddings", 0);
        let scale = 1.0 / (config.feature_dim as f64).sqrt();
        let draw = |rng: &mut RngStream| -> Vec<f64> {
            (0..config.feature_dim).map(|_| rng.normal() * scale * 2.0).collect()
        };
        let mut embeddings = BTreeMap::new();
        for a in Attribute::CAPTIONED {
            for i in 0..a.values().len() {
                embeddings.insert((a, i), draw(&mut rng));
            }
        }
        let count_unit = draw(&mut rng);
        let n_combos = OBJECTS.len() * COLORS.len();
        let n_held = (config.heldout_combination_fraction * n_combos as f64).round() as usize;
        let mut combos: Vec<(usize, usize)> = (0..OBJECTS.len())
            .flat_map(|o| (0..COLORS.len()).map(move |c| (o, c)))
            .collect();
        RngStream::named(config.seed, "world.heldout", 0).shuffle(&mut combos);
        let heldout = combos.into_iter().take(n_held).collect();
        Ok(Self {
            config,
            embeddings,
            count_unit,
            heldout,
        })
    }

    /// (object, color) combinations never shown in pairs or QA training.
    pub fn heldout(&self) -> &BTreeSet<(usize, usize)> {
        &self.heldout
    }

    pub fn is_heldout(&self, s: &SceneSpec) -> bool {
        self.heldout.contains(&(s.object, s.color))
    }

    pub fn attribute_embedding(&self, a: Attribute, idx: usize) -> Option<&[f64]> {
        if a == Attribute::Count {
            return None;
        }
        self.embeddings.get(&(a, idx)).map(|v| v.as_slice())
    }

    pub fn sample_scene(&self, rng: &mut RngStream, scene_id: u64, allow_heldout: bool) -> SceneSpec {
        loop {
            let s = SceneSpec {
                object: rng.below(OBJECTS.len()),
                color: rng.below(COLORS.len()),
                action: rng.below(ACTIONS.len()),
                location: rng.below(LOCATIONS.len()),
                count: 1 + rng.below(COUNTS.len()),
                scene_id,
            };
            if allow_heldout || !self.is_heldout(&s) {
                return s;
            }
        }
    }

    /// Frame i = Σ attribute embeddings + count · unit + per-frame noise.
    pub fn visual_features(&self, scene: &SceneSpec, rng: &mut RngStream) -> VideoFeatures {
        let d = self.config.feature_dim;
        let mut base = vec![0.0f64; d];
        for a in Attribute::CAPTIONED {
            for (b, e) in base.iter_mut().zip(&self.embeddings[&(a, scene.index(a))]) {
                *b += e;
            }
        }
        for (b, u) in base.iter_mut().zip(&self.count_unit) {
            *b += scene.count as f64 * u;
        }
        let mut features = Vec::with_capacity(self.config.frames * d);
        for _ in 0..self.config.frames {
            for &b in &base {
                let noise = if self.config.noise_sigma > 0.0 {
                    rng.normal() * self.config.noise_sigma
                } else {
                    0.0
                };
                features.push((b + noise) as f32);
            }
        }
        VideoFeatures {
            features,
            valid: vec![true; self.config.frames],
            dim: d,
            source_id: format!("scene{}", scene.scene_id),
        }
    }

    /// Templated declaratives and question-answer sentences over the full
    /// lexicon.
    pub fn text_corpus(&self) -> Vec<String> {
        let n = self.config.n_text_sentences;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = RngStream::named(self.config.seed, "corpus.sentence", i as u64);
            let s = self.sample_scene(&mut rng, TEXT_IDS + i as u64, true);
            out.push(corpus_sentence(&s, &mut rng));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in &out {
            for a in Attribute::ALL {
                for v in a.values() {
                    if contains_phrase(line, v) {
                        *counts.entry(v).or_default() += 1;
                    }
                }
            }
        }
        let mut extra = 0u64;
        for a in Attribute::ALL {
            for (idx, v) in a.values().iter().enumerate() {
                let have = counts.get(v).copied().unwrap_or(0);
                for _ in have..self.config.min_value_count {
                    let mut rng = RngStream::named(self.config.seed, "corpus.topup", extra);
                    let s = self.sample_scene(&mut rng, TEXT_IDS + n as u64 + extra, true).with(a, idx);
                    out.push(format!("{} . {} .", s.caption(), s.count_sentence()));
                    extra += 1;
                }
            }
        }
        out
    }

    /// Context sentences with the context-determined answer masked, and the
    /// expected answer tokens.
    pub fn cloze_probes(&self, n: usize) -> Vec<(String, Vec<String>)> {
        (0..n)
            .map(|i| {
                let mut rng = RngStream::named(self.config.seed, "corpus.sentence", i as u64);
                let s = self.sample_scene(&mut rng, TEXT_IDS + i as u64, true);
                let a = Attribute::ALL[rng.below(Attribute::ALL.len())];
                let ans = s.value(a);
                let n_tok = ans.split(' ').count();
                let masks = vec!["[MASK]"; n_tok].join(" ");
                let text = format!("{} . question : {} ? answer : {masks} .", context(&s, a), s.question(a));
                (text, ans.split(' ').map(String::from).collect())
            })
            .collect()
    }

    /// Captioned clips; heldout combinations never appear.
    pub fn pairs(&self) -> Vec<CaptionPair> {
        (0..self.config.n_pairs)
            .map(|i| {
                let mut rng = RngStream::named(self.config.seed, "pairs.scene", i as u64);
                let s = self.sample_scene(&mut rng, PAIR_IDS + i as u64, false);
                CaptionPair {
                    video: self.visual_features(&s, &mut rng),
                    caption: s.caption(),
                }
            })
            .collect()
    }

    pub fn qa_scene(&self, kind: TaskKind, split: Split, i: usize) -> SceneSpec {
        let (label, base) = match split {
            Split::Train => ("qa.train", QA_TRAIN_IDS),
            Split::Test => ("qa.test", QA_TEST_IDS),
        };
        let k = TaskKind::ALL.iter().position(|&x| x == kind).unwrap_or(0) as u64;
        let mut rng = RngStream::named(self.config.seed, label, k * KIND_STRIDE + i as u64);
        self.sample_scene(&mut rng, base + k * KIND_STRIDE + i as u64, split == Split::Test)
    }

    /// QA instances with features attached. Scene ids are disjoint across
    /// splits; heldout combinations occur only in the test split.
    pub fn qa(&self, kind: TaskKind, split: Split) -> Vec<TaskInstance> {
        let n = match split {
            Split::Train => self.config.n_qa_train,
            Split::Test => self.config.n_qa_test,
        };
        let label = match split {
            Split::Train => "qa.train.item",
            Split::Test => "qa.test.item",
        };
        let k = TaskKind::ALL.iter().position(|&x| x == kind).unwrap_or(0) as u64;
        (0..n)
            .map(|i| {
                let s = self.qa_scene(kind, split, i);
                let mut rng = RngStream::named(self.config.seed, label, k * KIND_STRIDE + i as u64);
                let video = self.visual_features(&s, &mut rng);
                let attrs: &[Attribute] = match kind {
                    TaskKind::FillBlank => &Attribute::CAPTIONED,
                    _ => &Attribute::ALL,
                };
                let a = attrs[rng.below(attrs.len())];
                let gold_value = s.value(a);
                let subtitles = (rng.uniform() < self.config.subtitle_probability).then(|| hint(a, gold_value));
                let id = format!("{}-{}-{}", kind.short_name(), split_name(split), i);
                let mut inst = TaskInstance {
                    id,
                    kind,
                    question_type: a.name().to_string(),
                    question: None,
                    candidates: Vec::new(),
                    sentence: None,
                    subtitles,
                    video_id: video.source_id.clone(),
                    gold: Gold::Answer(gold_value.to_string()),
                    video: Some(video),
                };
                match kind {
                    TaskKind::OpenEnded => inst.question = Some(s.question(a)),
                    TaskKind::FillBlank => inst.sentence = Some(s.caption_with_blank(a)),
                    TaskKind::MultiChoice => {
                        inst.question = Some(s.question(a));
                        let mut others: Vec<usize> = (0..a.values().len()).filter(|&j| j != s.index(a)).collect();
                        rng.shuffle(&mut others);
                        let mut cands: Vec<String> = others[..3].iter().map(|&j| a.values()[j].to_string()).collect();
                        let pos = rng.below(4);
                        cands.insert(pos, gold_value.to_string());
                        inst.candidates = cands;
                        inst.gold = Gold::Index(pos);
                    }
                }
                inst
            })
            .collect()
    }

    /// Exact accuracy of always answering the most likely value per question
    /// type, from the generator's distributions.
    pub fn marginal_floor(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::MultiChoice => 0.25,
            TaskKind::OpenEnded => {
                Attribute::ALL.iter().map(|a| 1.0 / a.values().len() as f64).sum::<f64>() / Attribute::ALL.len() as f64
            }
            TaskKind::FillBlank => {
                Attribute::CAPTIONED
                    .iter()
                    .map(|a| 1.0 / a.values().len() as f64)
                    .sum::<f64>()
                    / Attribute::CAPTIONED.len() as f64
            }
        }
    }

    /// Every answer string the generator can emit for open-ended questions.
    pub fn answer_lexicon() -> Vec<String> {
        Attribute::ALL
            .iter()
            .flat_map(|a| a.values().iter().map(|v| v.to_string()))
            .collect()
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn contains_phrase(line: &str, phrase: &str) -> bool {
    let l = format!(" {line} ");
    l.contains(&format!(" {phrase} "))
}

/// Caption, plus the count sentence when the count is asked about.
fn context(s: &SceneSpec, a: Attribute) -> String {
    if a == Attribute::Count {
        format!("{} . {}", s.caption(), s.count_sentence())
    } else {
        s.caption()
    }
}

fn corpus_sentence(s: &SceneSpec, rng: &mut RngStream) -> String {
    let a = Attribute::ALL[rng.below(Attribute::ALL.len())];
    let gold = s.value(a);
    let u = rng.uniform();
    let q = s.question(a);
    let other = |rng: &mut RngStream| {
        let vals = a.values();
        let mut j = rng.below(vals.len() - 1);
        if j >= s.index(a) {
            j += 1;
        }
        vals[j]
    };
    if u < 0.80 {
        format!("{} . question : {q} ? answer : {gold} .", context(s, a))
    } else if u < 0.90 {
        format!("question : {q} ? answer : {gold} . subtitles : {}", hint(a, gold))
    } else if u < 0.95 {
        let (cand, yn) = if rng.uniform() < 0.5 { (gold, "yes") } else { (other(rng), "no") };
        format!("{} . question : {q} ? is it ' {cand} ' ? {yn} .", context(s, a))
    } else if u < 0.975 {
        format!("{} .", s.caption())
    } else {
        let b = Attribute::CAPTIONED[rng.below(4)];
        format!("{} . subtitles : {}", s.caption(), hint(b, s.value(b)))
    }
}
