//! Line-delimited JSON story files.
//!
//! Ground-truth labels on disk are 0-based (`[0, 0, 1, 0]`); in memory they
//! are the 1-based canonical form used by the core crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unweave_core::{ClipFeature, Provenance, Story, ThreadAssignment};

/// Per-clip payload shown to annotators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipDisplay {
    /// 2-D projection of the clip feature.
    pub xy: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    pub id: String,
    pub clips: Vec<Vec<f64>>,
    /// 0-based thread labels in first-appearance order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<usize>>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<Vec<ClipDisplay>>,
}

impl StoryRecord {
    pub fn from_story(story: &Story) -> Self {
        Self {
            id: story.id.clone(),
            clips: story.clips.iter().map(|c| c.values().to_vec()).collect(),
            ground_truth: story.ground_truth.as_ref().map(ThreadAssignment::to_zero_based),
            provenance: story.provenance.clone(),
            display: None,
        }
    }

    pub fn to_story(&self) -> anyhow::Result<Story> {
        let clips = self
            .clips
            .iter()
            .map(|c| ClipFeature::new(c.clone()))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("story {}", self.id))?;
        let ground_truth = self
            .ground_truth
            .as_deref()
            .map(ThreadAssignment::from_zero_based)
            .transpose()
            .with_context(|| format!("story {} ground truth", self.id))?;
        let story = Story {
            id: self.id.clone(),
            clips,
            ground_truth,
            provenance: self.provenance.clone(),
        };
        story.validate(story.clips.first().map(ClipFeature::dim)).with_context(|| format!("story {}", self.id))?;
        if let Some(d) = &self.display {
            if d.len() != story.len() {
                bail!("story {}: {} display entries for {} clips", self.id, d.len(), story.len());
            }
        }
        Ok(story)
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stories(path: &Path) -> anyhow::Result<Vec<Story>> {
    let records: Vec<StoryRecord> = read_jsonl(path)?;
    let stories = records.iter().map(StoryRecord::to_story).collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(first) = stories.first() {
        let dim = first.clips[0].dim();
        for s in &stories {
            s.validate(Some(dim)).with_context(|| format!("story {}", s.id))?;
        }
    }
    Ok(stories)
}

pub fn write_stories(path: &Path, stories: &[Story]) -> anyhow::Result<()> {
    let records: Vec<StoryRecord> = stories.iter().map(StoryRecord::from_story).collect();
    write_jsonl(path, &records)
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
