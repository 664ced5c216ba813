//! Probe sweeps (freeze/re-initialize one layer at a time, Fig. 3 style)
//! and hyper-parameter grids over c1, c2, r_exp or the few-shot count M.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use slowfast_core::probe::InterventionKind;

use crate::config::{InterventionSection, RunnerConfig};
use crate::experiment::{run_experiment, RunSummary};
use crate::{Result, RunnerError};

/// One row of the per-layer intervention table; `layer` is `None` for the
/// no-intervention baseline (Fig. 3's dotted line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: Option<u32>,
    pub mean_source: f64,
    pub mean_non_source: f64,
    pub mean_gap: f64,
    pub std_source: f64,
    pub std_non_source: f64,
    pub std_gap: f64,
}

impl SweepRow {
    fn from_summary(layer: Option<u32>, s: &RunSummary) -> Self {
        SweepRow {
            layer,
            mean_source: s.mean_source,
            mean_non_source: s.mean_non_source,
            mean_gap: s.mean_gap,
            std_source: s.std_source,
            std_non_source: s.std_non_source,
            std_gap: s.std_gap,
        }
    }
}

/// Run the baseline plus one single-layer intervention per requested
/// layer; each sub-run is a full `run_experiment` under its own name.
/// An empty layer list yields just the baseline row.
pub fn run_probe_sweep(
    base: &RunnerConfig,
    kind: InterventionKind,
    layers: &[u32],
    out_root: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(layers.len() + 1);

    let mut baseline_cfg = base.clone();
    baseline_cfg.experiment.intervention = None;
    baseline_cfg.name = format!("{}-{kind}-baseline", base.name);
    let baseline = run_experiment(&baseline_cfg, out_root)?;
    rows.push(SweepRow::from_summary(None, &baseline));

    for &layer in layers {
        let mut cfg = base.clone();
        cfg.experiment.intervention = Some(InterventionSection {
            kind: kind.to_string(),
            layers: vec![layer],
            sublayer: None,
            all_but_top_k: None,
        });
        cfg.name = format!("{}-{kind}-layer{layer}", base.name);
        let summary = run_experiment(&cfg, out_root)?;
        rows.push(SweepRow::from_summary(Some(layer), &summary));
    }

    let path = out_root.join(format!("{}-{kind}-sweep.csv", base.name));
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(f, "layer,mean_source,mean_non_source,mean_gap,std_source,std_non_source,std_gap")?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.layer.map(|l| l.to_string()).unwrap_or_else(|| "baseline".into()),
            r.mean_source,
            r.mean_non_source,
            r.mean_gap,
            r.std_source,
            r.std_non_source,
            r.std_gap
        )?;
    }
    f.flush()?;
    Ok(rows)
}

/// Hyper-parameter axes with a paper-default grid each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    C1,
    C2,
    RExp,
    M,
}

impl GridAxis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            GridAxis::C1 => vec![0.5, 0.1, 0.01, 0.001, 0.0],
            GridAxis::C2 => vec![1.0, 5.0, 10.0, 20.0],
            GridAxis::RExp => vec![1.0, 2.0, 3.0, 4.0],
            GridAxis::M => vec![0.0, 5.0, 10.0, 20.0],
        }
    }
}

impl fmt::Display for GridAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridAxis::C1 => "c1",
            GridAxis::C2 => "c2",
            GridAxis::RExp => "r_exp",
            GridAxis::M => "m",
        })
    }
}

impl FromStr for GridAxis {
    type Err = RunnerError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" => Ok(GridAxis::C1),
            "c2" => Ok(GridAxis::C2),
            "r_exp" | "r" => Ok(GridAxis::RExp),
            "m" | "M" => Ok(GridAxis::M),
            other => Err(RunnerError::config(format!(
                "unknown grid axis `{other}` (expected c1, c2, r_exp or m)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub axis: GridAxis,
    pub value: f64,
    pub summary: RunSummary,
}

fn integral(axis: GridAxis, v: f64) -> Result<u64> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(RunnerError::config(format!("{axis} grid value {v} must be a whole number")));
    }
    Ok(v as u64)
}

fn apply_axis(cfg: &mut RunnerConfig, axis: GridAxis, value: f64) -> Result<()> {
    match axis {
        GridAxis::C1 => cfg.policy.c1 = value,
        GridAxis::C2 => cfg.policy.c2 = value,
        GridAxis::RExp => cfg.policy.r_exp = integral(axis, value)? as u32,
        GridAxis::M => cfg.experiment.m_few_shot = integral(axis, value)? as usize,
    }
    Ok(())
}

/// One `run_experiment` per grid value, collected into a single CSV. A
/// `value` becomes part of each sub-run's name, so every grid point keeps
/// its full per-seed output tree.
pub fn run_grid(
    base: &RunnerConfig,
    axis: GridAxis,
    values: &[f64],
    out_root: &Path,
) -> Result<Vec<GridRow>> {
    if values.is_empty() {
        return Err(RunnerError::config("grid values must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        cfg.name = format!("{}-{axis}-{value}", base.name);
        let summary = run_experiment(&cfg, out_root)?;
        rows.push(GridRow { axis, value, summary });
    }

    let path = out_root.join(format!("{}-grid-{axis}.csv", base.name));
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(f, "{axis},mean_source,mean_non_source,mean_gap,std_source,std_non_source,std_gap")?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.value,
            r.summary.mean_source,
            r.summary.mean_non_source,
            r.summary.mean_gap,
            r.summary.std_source,
            r.summary.std_non_source,
            r.summary.std_gap
        )?;
    }
    f.flush()?;
    Ok(rows)
}
