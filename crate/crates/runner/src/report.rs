//! Load an experiment's `summary.json`, re-derive the aggregates from the
//! stored per-seed values (they must agree to 1e-12 — anything else means
//! the file was edited or torn) and render a plain-text table.

use std::fs;
use std::path::Path;

use crate::experiment::{mean_std, RunSummary};
use crate::{Result, RunnerError};

pub fn load_summary(exp_dir: &Path) -> Result<RunSummary> {
    let path = exp_dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        RunnerError::config(format!("cannot read {}: {e}", path.display()))
    })?;
    let summary: RunSummary = serde_json::from_str(&text)?;
    verify_aggregates(&summary)?;
    Ok(summary)
}

/// The stored mean/stddev must be recomputable from the per-seed values.
pub fn verify_aggregates(s: &RunSummary) -> Result<()> {
    let check = |label: &str, stored_mean: f64, stored_std: f64, values: Vec<f64>| -> Result<()> {
        let (mean, std) = mean_std(&values);
        if (mean - stored_mean).abs() > 1e-12 || (std - stored_std).abs() > 1e-12 {
            return Err(RunnerError::config(format!(
                "summary {label} aggregate ({stored_mean}, {stored_std}) does not match \
                 recomputation ({mean}, {std}); the file is inconsistent"
            )));
        }
        Ok(())
    };
    check(
        "source",
        s.mean_source,
        s.std_source,
        s.per_seed.iter().map(|r| r.source_metric).collect(),
    )?;
    check(
        "non_source",
        s.mean_non_source,
        s.std_non_source,
        s.per_seed.iter().map(|r| r.non_source_mean).collect(),
    )?;
    check("gap", s.mean_gap, s.std_gap, s.per_seed.iter().map(|r| r.gap).collect())
}

pub fn render(s: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "experiment {}  method {}  task {}  M {}\n",
        s.name, s.method, s.task, s.m_few_shot
    ));
    out.push_str(&format!(
        "{:<6} {:>9} {:>10} {:>12} {:>8}\n",
        "seed", "best_step", "source", "non_source", "gap"
    ));
    for r in &s.per_seed {
        out.push_str(&format!(
            "{:<6} {:>9} {:>10.2} {:>12.2} {:>8.2}\n",
            r.seed, r.best_step, r.source_metric, r.non_source_mean, r.gap
        ));
    }
    out.push_str(&format!(
        "{:<6} {:>9} {:>10.2} {:>12.2} {:>8.2}\n",
        "mean", "", s.mean_source, s.mean_non_source, s.mean_gap
    ));
    out.push_str(&format!(
        "{:<6} {:>9} {:>10.2} {:>12.2} {:>8.2}\n",
        "std", "", s.std_source, s.std_non_source, s.std_gap
    ));
    out
}

/// The `report` subcommand: verify and print one experiment directory.
pub fn report(exp_dir: &Path) -> Result<String> {
    let summary = load_summary(exp_dir)?;
    Ok(render(&summary))
}
