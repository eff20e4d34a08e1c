//! Run comparison: per-task accuracy deltas between run directories, with
//! arrow semantics on percentage points (improvement above 0.3, decrease
//! below -0.3, same within the band).

use std::collections::BTreeMap;
use std::path::Path;

use adapterlab::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::Summary;

pub const SAME_BAND_POINTS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrow {
    Improvement,
    Decrease,
    Same,
    Absent,
}

impl Arrow {
    pub fn glyph(&self) -> &'static str {
        match self {
            Arrow::Improvement => "up",
            Arrow::Decrease => "down",
            Arrow::Same => "same",
            Arrow::Absent => "absent",
        }
    }
}

/// Classify a delta measured in accuracy percentage points.
pub fn arrow_for(delta_points: f64) -> Arrow {
    if delta_points > SAME_BAND_POINTS {
        Arrow::Improvement
    } else if delta_points < -SAME_BAND_POINTS {
        Arrow::Decrease
    } else {
        Arrow::Same
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub task: String,
    pub mode: String,
    pub baseline: Option<f64>,
    pub candidate: Option<f64>,
    /// percentage points
    pub delta: Option<f64>,
    pub arrow: Arrow,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub baseline_dir: String,
    pub candidate_dir: String,
    pub rows: Vec<CompareRow>,
    pub has_absent: bool,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,mode,baseline,candidate,delta_points,arrow\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.task,
                r.mode,
                r.baseline.map_or(String::new(), |v| format!("{:.4}", v)),
                r.candidate.map_or(String::new(), |v| format!("{:.4}", v)),
                r.delta.map_or(String::new(), |v| format!("{:+.2}", v)),
                r.arrow.glyph()
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# Run comparison\n\nbaseline: `{}`\ncandidate: `{}`\n\n| task | mode | baseline | candidate | delta (pts) | verdict |\n|---|---|---|---|---|---|\n",
            self.baseline_dir, self.candidate_dir
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.task,
                r.mode,
                r.baseline.map_or("-".into(), |v| format!("{:.2}", v * 100.0)),
                r.candidate.map_or("-".into(), |v| format!("{:.2}", v * 100.0)),
                r.delta.map_or("-".into(), |v| format!("{:+.2}", v)),
                r.arrow.glyph()
            ));
        }
        out
    }
}

/// Compare the summaries of two run directories over the mode columns they
/// share. Tasks present in only one run yield `Absent` rows and set
/// `has_absent` (the command exits nonzero on those).
pub fn compare_report(baseline_dir: &Path, candidate_dir: &Path) -> Result<CompareReport> {
    let base = Summary::read(&baseline_dir.join("summary.json"))?;
    let cand = Summary::read(&candidate_dir.join("summary.json"))?;

    let mut tasks: Vec<String> = base.tasks.clone();
    for t in &cand.tasks {
        if !tasks.contains(t) {
            tasks.push(t.clone());
        }
    }
    let shared_modes: Vec<String> =
        base.columns.iter().filter(|m| cand.columns.contains(m)).cloned().collect();
    if shared_modes.is_empty() {
        return Err(Error::Usage("runs share no mode columns to compare".into()));
    }

    let lookup = |s: &Summary, task: &str, mode: &str| -> Option<f64> {
        s.cells.get(task).and_then(|m: &BTreeMap<String, crate::experiment::SummaryCell>| {
            m.get(mode).map(|c| c.mean)
        })
    };

    let mut rows = Vec::new();
    let mut has_absent = false;
    for task in &tasks {
        for mode in &shared_modes {
            let b = lookup(&base, task, mode);
            let c = lookup(&cand, task, mode);
            let (delta, arrow) = match (b, c) {
                (Some(b), Some(c)) => {
                    let pts = (c - b) * 100.0;
                    (Some(pts), arrow_for(pts))
                }
                _ => {
                    has_absent = true;
                    (None, Arrow::Absent)
                }
            };
            rows.push(CompareRow {
                task: task.clone(),
                mode: mode.clone(),
                baseline: b,
                candidate: c,
                delta,
                arrow,
            });
        }
    }
    Ok(CompareReport {
        baseline_dir: baseline_dir.display().to_string(),
        candidate_dir: candidate_dir.display().to_string(),
        rows,
        has_absent,
    })
}
