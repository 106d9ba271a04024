//! Result tables: one row per checkpoint, with best-seed and mean ± std
//! views over rows that share a group label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{aggregate_score, TaskResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub result: TaskResult,
    /// Spread over probe seeds, as a fraction, when the task has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint: String,
    /// Rows with the same group are seeds of one configuration.
    pub group: String,
    pub tasks: Vec<TaskScore>,
}

impl ReportRow {
    pub fn score(&self) -> Result<f64> {
        let results: Vec<TaskResult> = self.tasks.iter().map(|t| t.result).collect();
        aggregate_score(&results)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Per-task mean and sample standard deviation over a group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub runs: usize,
    pub tasks: Vec<(String, f64, f64)>,
    pub score: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad report JSON: {e}")))
    }

    pub fn merge(reports: impl IntoIterator<Item = Report>) -> Report {
        Report {
            rows: reports.into_iter().flat_map(|r| r.rows).collect(),
        }
    }

    fn task_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            for t in &row.tasks {
                if !names.contains(&t.task) {
                    names.push(t.task.clone());
                }
            }
        }
        names
    }

    /// The highest-scoring row of every group.
    pub fn best_seed(&self) -> Result<Report> {
        let mut best: BTreeMap<&str, (f64, &ReportRow)> = BTreeMap::new();
        for row in &self.rows {
            let score = row.score()?;
            let entry = best.entry(&row.group).or_insert((score, row));
            if score > entry.0 {
                *entry = (score, row);
            }
        }
        Ok(Report {
            rows: best.into_values().map(|(_, r)| r.clone()).collect(),
        })
    }

    /// Mean ± std of every task and of the score, per group. Every row of a
    /// group must report the same tasks.
    pub fn group_summaries(&self) -> Result<Vec<GroupSummary>> {
        let mut groups: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(&row.group).or_default().push(row);
        }
        groups
            .into_iter()
            .map(|(group, rows)| {
                let names: Vec<&str> = rows[0].tasks.iter().map(|t| t.task.as_str()).collect();
                if rows.iter().any(|r| r.tasks.iter().map(|t| t.task.as_str()).ne(names.iter().copied())) {
                    return Err(Error::invalid(format!("rows of group {group:?} report different tasks")));
                }
                let tasks = names
                    .iter()
                    .enumerate()
                    .map(|(k, name)| {
                        let values: Vec<f64> = rows.iter().map(|r| r.tasks[k].result.scaled()).collect();
                        let (m, s) = mean_std(&values);
                        (name.to_string(), m, s)
                    })
                    .collect();
                let scores = rows.iter().map(|r| r.score()).collect::<Result<Vec<_>>>()?;
                Ok(GroupSummary {
                    group: group.to_string(),
                    runs: rows.len(),
                    tasks,
                    score: mean_std(&scores),
                })
            })
            .collect()
    }

    /// Tab-separated table. Correlations are scaled by 100, accuracies are
    /// percentages with their seed spread.
    pub fn to_text(&self) -> Result<String> {
        let names = self.task_names();
        let mut out = format!("checkpoint\tgroup\t{}\tscore\n", names.join("\t"));
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", row.checkpoint, row.group);
            for name in &names {
                match row.tasks.iter().find(|t| &t.task == name) {
                    Some(t) => match (t.result, t.std) {
                        (TaskResult::Accuracy(a), Some(s)) => {
                            let _ = write!(out, "\t{:.1} ± {:.2}", 100.0 * a, 100.0 * s);
                        }
                        (r, _) => {
                            let _ = write!(out, "\t{:.1}", r.scaled());
                        }
                    },
                    None => out.push_str("\t-"),
                }
            }
            let _ = writeln!(out, "\t{:.2}", row.score()?);
        }
        Ok(out)
    }

    pub fn summary_text(&self) -> Result<String> {
        let summaries = self.group_summaries()?;
        let mut out = String::new();
        for s in summaries {
            let _ = write!(out, "{}\truns={}", s.group, s.runs);
            for (name, m, sd) in &s.tasks {
                let _ = write!(out, "\t{name}={m:.2}±{sd:.2}");
            }
            let _ = writeln!(out, "\tscore={:.2}±{:.2}", s.score.0, s.score.1);
        }
        Ok(out)
    }
}
