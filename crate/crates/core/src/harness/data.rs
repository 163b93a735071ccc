//! On-disk datasets: a text corpus, caption pairs and QA splits as
//! line-delimited JSON, with every clip's features in one `FBFT` file.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{CaptionPair, VideoFeatures};
use crate::harness::features::{load_features, save_features, FeatureTable};
use crate::synth::{Split, World, WorldConfig};
use crate::tasks::{TaskInstance, TaskKind};

pub const CORPUS: &str = "corpus.txt";
pub const PAIRS: &str = "pairs.jsonl";
pub const FEATURES: &str = "features.fbft";
pub const WORLD: &str = "world.json";

pub fn qa_file(kind: TaskKind, split: Split) -> String {
    format!("qa_{}_{}.jsonl", kind.short_name(), split.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    video_id: String,
    caption: String,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Everything the pipeline consumes, generated from one world.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub corpus: Vec<String>,
    pub pairs: Vec<CaptionPair>,
    /// `(kind, split, instances)` with video attached.
    pub qa: Vec<(TaskKind, Split, Vec<TaskInstance>)>,
}

impl Datasets {
    pub fn generate(world: &World) -> Self {
        let mut qa = Vec::new();
        for kind in [TaskKind::OpenEnded, TaskKind::MultiChoice, TaskKind::FillBlank] {
            for split in [Split::Train, Split::Test] {
                qa.push((kind, split, world.qa(kind, split)));
            }
        }
        Self {
            corpus: world.text_corpus(),
            pairs: world.pairs(),
            qa,
        }
    }

    pub fn qa(&self, kind: TaskKind, split: Split) -> &[TaskInstance] {
        self.qa
            .iter()
            .find(|(k, s, _)| *k == kind && *s == split)
            .map(|(_, _, v)| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn save(&self, dir: &Path, world: &WorldConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(WORLD), serde_json::to_string_pretty(world)?)?;
        let mut corpus = self.corpus.join("\n");
        corpus.push('\n');
        std::fs::write(dir.join(CORPUS), corpus)?;
        write_jsonl(
            &dir.join(PAIRS),
            self.pairs.iter().map(|p| PairRecord {
                video_id: p.video.source_id.clone(),
                caption: p.caption.clone(),
            }),
        )?;
        let mut videos: Vec<&VideoFeatures> = self.pairs.iter().map(|p| &p.video).collect();
        for (kind, split, insts) in &self.qa {
            write_jsonl(&dir.join(qa_file(*kind, *split)), insts.iter())?;
            videos.extend(insts.iter().filter_map(|i| i.video.as_ref()));
        }
        videos.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        videos.dedup_by(|a, b| a.source_id == b.source_id);
        save_features(&dir.join(FEATURES), videos)
    }
}

/// A data directory written by [`Datasets::save`].
#[derive(Clone, Debug)]
pub struct DataDir {
    pub dir: PathBuf,
    pub world: WorldConfig,
}

impl DataDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let world: WorldConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(WORLD))?)
            .map_err(|e| Error::Format(format!("bad world config: {e}")))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            world,
        })
    }

    pub fn corpus(&self) -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(self.dir.join(CORPUS))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect())
    }

    pub fn features(&self) -> Result<FeatureTable> {
        load_features(&self.dir.join(FEATURES), self.world.frames)
    }

    pub fn pairs(&self, features: &FeatureTable) -> Result<Vec<CaptionPair>> {
        read_jsonl::<PairRecord>(&self.dir.join(PAIRS))?
            .into_iter()
            .map(|r| {
                Ok(CaptionPair {
                    video: lookup(features, &r.video_id)?.clone(),
                    caption: r.caption,
                })
            })
            .collect()
    }

    pub fn qa(&self, kind: TaskKind, split: Split, features: &FeatureTable) -> Result<Vec<TaskInstance>> {
        load_instances(&self.dir.join(qa_file(kind, split)), features)
    }
}

fn lookup<'a>(features: &'a FeatureTable, id: &str) -> Result<&'a VideoFeatures> {
    features
        .get(id)
        .ok_or_else(|| Error::Format(format!("no features for video `{id}`")))
}

/// Reads QA instances and attaches their features.
pub fn load_instances(path: &Path, features: &FeatureTable) -> Result<Vec<TaskInstance>> {
    let mut insts: Vec<TaskInstance> = read_jsonl(path)?;
    for inst in &mut insts {
        inst.validate()?;
        inst.video = Some(lookup(features, &inst.video_id)?.clone());
    }
    Ok(insts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_reload() {
        let cfg = WorldConfig {
            n_text_sentences: 50,
            n_pairs: 20,
            n_qa_train: 10,
            n_qa_test: 10,
            min_value_count: 0,
            ..Default::default()
        };
        let world = World::new(cfg.clone()).unwrap();
        let data = Datasets::generate(&world);
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path(), &cfg).unwrap();
        let d = DataDir::open(dir.path()).unwrap();
        assert_eq!(d.world, cfg);
        assert_eq!(d.corpus().unwrap(), data.corpus);
        let feats = d.features().unwrap();
        assert_eq!(d.pairs(&feats).unwrap(), data.pairs);
        let back = d.qa(TaskKind::MultiChoice, Split::Test, &feats).unwrap();
        assert_eq!(back, data.qa(TaskKind::MultiChoice, Split::Test));
    }
}
