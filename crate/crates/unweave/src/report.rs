//! Evaluation documents and the tables and plot series derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::bail;
use serde::{Deserialize, Serialize};
use unweave_core::metrics::{MetricsReport, Tally};

use crate::io::{read_json, write_json};

pub const EVAL_FILE: &str = "eval.json";
pub const TABLE_FILE: &str = "table.csv";
pub const TFA_CURVE_FILE: &str = "tfa_by_clips.csv";
pub const RI_BY_LENGTH_FILE: &str = "ri_by_length.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const STORIES_FILE: &str = "stories.csv";

/// Everything `eval` and `baseline` produce for one story set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub stories: String,
    pub methods: Vec<MetricsReport>,
}

impl EvalDocument {
    /// Adds or replaces the report of the same method.
    pub fn upsert(&mut self, report: MetricsReport) {
        match self.methods.iter_mut().find(|m| m.method == report.method) {
            Some(slot) => *slot = report,
            None => self.methods.push(report),
        }
    }

    /// Loads `dir/eval.json` if present, else starts an empty document.
    pub fn load_or_new(dir: &Path, stories: &str) -> anyhow::Result<Self> {
        let path = dir.join(EVAL_FILE);
        if path.exists() {
            let doc: Self = read_json(&path)?;
            if doc.stories != stories {
                bail!(
                    "{} was computed on {}, not {stories}; use another output directory",
                    path.display(),
                    doc.stories
                );
            }
            Ok(doc)
        } else {
            Ok(Self {
                stories: stories.into(),
                methods: Vec::new(),
            })
        }
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(EVAL_FILE), self)
    }
}

#[derive(Debug, Serialize)]
struct TableRow<'a> {
    method: &'a str,
    /// True thread count, or "all".
    threads: String,
    stories: usize,
    mean_ri: Option<f64>,
    mean_delta_n: f64,
    /// Decisions made with `threads` threads seen so far.
    tfa: Option<f64>,
    /// Decisions in stories with `threads` threads.
    tfa_by_story: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    method: &'a str,
    clips_observed: usize,
    tfa: Option<f64>,
    decisions: usize,
}

#[derive(Debug, Serialize)]
struct LengthRow<'a> {
    method: &'a str,
    clips: usize,
    stories: usize,
    mean_ri: Option<f64>,
}

#[derive(Debug, Serialize)]
struct StoryRow<'a> {
    method: &'a str,
    id: &'a str,
    clips: usize,
    true_threads: usize,
    pred_threads: f64,
    ri: Option<f64>,
    delta_n: f64,
}

fn tfa_for(report: &MetricsReport, threads: Option<usize>) -> Option<f64> {
    let tfa = report.tfa.as_ref()?;
    match threads {
        Some(n) => tfa.by_prefix_threads.get(&n).and_then(Tally::mean),
        None => tfa.overall.mean(),
    }
}

fn tfa_by_story(report: &MetricsReport, threads: Option<usize>) -> Option<f64> {
    let tfa = report.tfa.as_ref()?;
    match threads {
        Some(n) => tfa.by_story_threads.get(&n).and_then(Tally::mean),
        None => tfa.overall.mean(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// RI, ΔN and TFA per method and true thread count, plus an "all" row.
pub fn write_table(path: &Path, doc: &EvalDocument) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for m in &doc.methods {
        for (&n, b) in &m.by_threads {
            rows.push(TableRow {
                method: &m.method,
                threads: n.to_string(),
                stories: b.stories,
                mean_ri: b.mean_ri,
                mean_delta_n: b.mean_delta_n,
                tfa: tfa_for(m, Some(n)),
                tfa_by_story: tfa_by_story(m, Some(n)),
            });
        }
        rows.push(TableRow {
            method: &m.method,
            threads: "all".into(),
            stories: m.overall.stories,
            mean_ri: m.overall.mean_ri,
            mean_delta_n: m.overall.mean_delta_n,
            tfa: tfa_for(m, None),
            tfa_by_story: tfa_by_story(m, None),
        });
    }
    write_csv(path, rows)
}

/// One row per (method, clips observed), for clips observed `2..=max length`.
pub fn write_tfa_curve(path: &Path, doc: &EvalDocument) -> anyhow::Result<()> {
    let longest = doc
        .methods
        .iter()
        .flat_map(|m| m.stories.iter().map(|s| s.clips))
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for m in &doc.methods {
        let Some(tfa) = &m.tfa else { continue };
        for t in 2..=longest {
            let tally = tfa.by_clips_observed.get(&t).copied().unwrap_or_default();
            rows.push(CurveRow {
                method: &m.method,
                clips_observed: t,
                tfa: tally.mean(),
                decisions: tally.count,
            });
        }
    }
    write_csv(path, rows)
}

/// One row per (method, story).
pub fn write_story_rows(path: &Path, doc: &EvalDocument) -> anyhow::Result<()> {
    let rows = doc.methods.iter().flat_map(|m| {
        m.stories.iter().map(|s| StoryRow {
            method: &m.method,
            id: &s.id,
            clips: s.clips,
            true_threads: s.true_threads,
            pred_threads: s.pred_threads,
            ri: s.ri,
            delta_n: s.delta_n,
        })
    });
    write_csv(path, rows)
}

/// Mean RI binned by story length in clips.
pub fn write_ri_by_length(path: &Path, doc: &EvalDocument) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for m in &doc.methods {
        let mut bins: BTreeMap<usize, (usize, Tally)> = BTreeMap::new();
        for s in &m.stories {
            let bin = bins.entry(s.clips).or_default();
            bin.0 += 1;
            if let Some(ri) = s.ri {
                bin.1.add(ri);
            }
        }
        for (clips, (stories, ri)) in bins {
            rows.push(LengthRow {
                method: &m.method,
                clips,
                stories,
                mean_ri: ri.mean(),
            });
        }
    }
    write_csv(path, rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

/// Fixed-width text table: RI / ΔN / TFA for each thread count.
pub fn summary_text(doc: &EvalDocument) -> String {
    let mut buckets: Vec<usize> = doc.methods.iter().flat_map(|m| m.by_threads.keys().copied()).collect();
    buckets.sort_unstable();
    buckets.dedup();
    let mut out = String::new();
    let _ = writeln!(out, "stories: {}", doc.stories);
    let _ = write!(out, "{:<20}", "method");
    for n in &buckets {
        let _ = write!(out, " | {:^20}", format!("{n} thread(s)"));
    }
    let _ = writeln!(out, " | {:^20}", "all");
    let _ = write!(out, "{:<20}", "");
    for _ in 0..=buckets.len() {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "RI", "dN", "TFA");
    }
    out.push('\n');
    for m in &doc.methods {
        let _ = write!(out, "{:<20}", m.method);
        for n in &buckets {
            match m.by_threads.get(n) {
                Some(b) => {
                    let _ = write!(
                        out,
                        " | {:>6} {:>6.2} {:>6}",
                        pct(b.mean_ri),
                        b.mean_delta_n,
                        pct(tfa_for(m, Some(*n)))
                    );
                }
                None => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6}", "-", "-", "-");
                }
            }
        }
        let _ = writeln!(
            out,
            " | {:>6} {:>6.2} {:>6}",
            pct(m.overall.mean_ri),
            m.overall.mean_delta_n,
            pct(tfa_for(m, None))
        );
    }
    out
}

/// Writes the table, curve and length-binned files next to `eval.json` and
/// returns the text summary.
pub fn report(results_dir: &Path) -> anyhow::Result<String> {
    let path = results_dir.join(EVAL_FILE);
    if !path.exists() {
        bail!(
            "missing evaluation artifacts in {}: expected {} (written by `unweave eval` or `unweave baseline`)",
            results_dir.display(),
            EVAL_FILE
        );
    }
    let doc: EvalDocument = read_json(&path)?;
    if doc.methods.is_empty() {
        bail!("{} lists no methods", path.display());
    }
    write_table(&results_dir.join(TABLE_FILE), &doc)?;
    write_tfa_curve(&results_dir.join(TFA_CURVE_FILE), &doc)?;
    write_ri_by_length(&results_dir.join(RI_BY_LENGTH_FILE), &doc)?;
    write_story_rows(&results_dir.join(STORIES_FILE), &doc)?;
    let text = summary_text(&doc);
    std::fs::write(results_dir.join(SUMMARY_FILE), &text)?;
    Ok(text)
}

/// Paths `report` writes, for listing in messages.
pub fn outputs(results_dir: &Path) -> Vec<PathBuf> {
    [TABLE_FILE, TFA_CURVE_FILE, RI_BY_LENGTH_FILE, STORIES_FILE, SUMMARY_FILE]
        .iter()
        .map(|f| results_dir.join(f))
        .collect()
}
