//! Significance tests over human-judgment CSV files.
//!
//! Two layouts are recognised. Pairwise preferences have a `winner` column
//! naming the preferred system (`tie` rows are counted but not tested).
//! Ratings have `system` and `rating` columns. Both may carry a `task`
//! column, in which case each task is tested separately.

use std::collections::BTreeMap;
use std::io::Read;

use anyhow::{anyhow, bail, Context, Result};
use empathy_core::metrics::{binomial_ab_test, mann_whitney_u, AbTestResult, RatingTestResult};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskReport {
    Preference {
        task: String,
        system_a: String,
        system_b: String,
        ties: u64,
        result: AbTestResult,
    },
    Rating {
        task: String,
        system_a: String,
        system_b: String,
        n_a: usize,
        n_b: usize,
        mean_a: f64,
        mean_b: f64,
        result: RatingTestResult,
    },
}

const ALL_TASKS: &str = "all";

pub fn analyze(reader: impl Read) -> Result<Vec<TaskReport>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let task_col = col("task");
    let rows: Vec<csv::StringRecord> = csv.records().collect::<Result<_, _>>()?;
    let task_of = |r: &csv::StringRecord| task_col.and_then(|i| r.get(i)).unwrap_or(ALL_TASKS).to_string();

    if let Some(w) = col("winner") {
        let mut by_task: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &rows {
            let winner = r.get(w).unwrap_or_default().to_string();
            by_task.entry(task_of(r)).or_default().push(winner);
        }
        by_task.into_iter().map(|(task, winners)| preference(task, &winners)).collect()
    } else if let (Some(s), Some(v)) = (col("system"), col("rating")) {
        let mut by_task: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for (line, r) in rows.iter().enumerate() {
            let rating: f64 = r
                .get(v)
                .unwrap_or_default()
                .parse()
                .with_context(|| format!("row {}: rating is not a number", line + 2))?;
            by_task
                .entry(task_of(r))
                .or_default()
                .entry(r.get(s).unwrap_or_default().to_string())
                .or_default()
                .push(rating);
        }
        by_task.into_iter().map(|(task, systems)| rating(task, systems)).collect()
    } else {
        bail!("expected a `winner` column or `system` and `rating` columns")
    }
}

fn preference(task: String, winners: &[String]) -> Result<TaskReport> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut ties = 0;
    for w in winners {
        if w.eq_ignore_ascii_case("tie") || w.is_empty() {
            ties += 1;
        } else {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    if counts.len() != 2 {
        bail!("task {task}: expected exactly two systems in `winner`, found {:?}", counts.keys());
    }
    let mut it = counts.into_iter();
    let (a, wins_a) = it.next().ok_or_else(|| anyhow!("missing system"))?;
    let (b, wins_b) = it.next().ok_or_else(|| anyhow!("missing system"))?;
    Ok(TaskReport::Preference {
        result: binomial_ab_test(wins_a, wins_a + wins_b)?,
        task,
        system_a: a.to_string(),
        system_b: b.to_string(),
        ties,
    })
}

fn rating(task: String, systems: BTreeMap<String, Vec<f64>>) -> Result<TaskReport> {
    if systems.len() != 2 {
        bail!("task {task}: expected exactly two systems, found {:?}", systems.keys());
    }
    let mut it = systems.into_iter();
    let (a, xs) = it.next().ok_or_else(|| anyhow!("missing system"))?;
    let (b, ys) = it.next().ok_or_else(|| anyhow!("missing system"))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(TaskReport::Rating {
        result: mann_whitney_u(&xs, &ys)?,
        task,
        n_a: xs.len(),
        n_b: ys.len(),
        mean_a: mean(&xs),
        mean_b: mean(&ys),
        system_a: a,
        system_b: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_file_per_task() {
        let csv = "task,winner\nempathy,bot\nempathy,bot\nempathy,base\nempathy,tie\nfluency,bot\nfluency,base\n";
        let reports = analyze(csv.as_bytes()).unwrap();
        assert_eq!(reports.len(), 2);
        match &reports[0] {
            TaskReport::Preference {
                task,
                system_a,
                ties,
                result,
                ..
            } => {
                assert_eq!(task, "empathy");
                assert_eq!(system_a, "base");
                assert_eq!(*ties, 1);
                assert_eq!((result.wins_a, result.wins_b), (1, 2));
                assert_eq!(result.p_value, 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rating_file() {
        let csv = "system,rating\na,1\na,2\na,3\nb,4\nb,5\nb,6\n";
        let reports = analyze(csv.as_bytes()).unwrap();
        match &reports[0] {
            TaskReport::Rating { result, mean_a, .. } => {
                assert!((result.p_value - 0.1).abs() < 1e-12);
                assert_eq!(*mean_a, 2.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_layout_and_extra_systems() {
        assert!(analyze("foo,bar\n1,2\n".as_bytes()).is_err());
        assert!(analyze("winner\na\nb\nc\n".as_bytes()).is_err());
        assert!(analyze("system,rating\na,x\n".as_bytes()).is_err());
    }
}
