//! Analysis instruments: freeze / re-initialize interventions, linear CKA
//! similarity tracking between the pre-trained and the working model, and
//! source/non-source performance-gap bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{forward, Batch, HeadRows, ModelParams, ParamTag, Sublayer};
use crate::schedule::Scheduler;
use crate::tape::gemm;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ── interventions ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// K forced to 0 for the target tags throughout training.
    Freeze,
    /// Target tensors re-drawn from the initializer before step 1.
    Reinitialize,
}

impl std::fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterventionKind::Freeze => "freeze",
            InterventionKind::Reinitialize => "reinitialize",
        })
    }
}

impl std::str::FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(InterventionKind::Freeze),
            "reinitialize" | "reinit" => Ok(InterventionKind::Reinitialize),
            other => Err(Error::InvalidArgument {
                op: "InterventionKind::from_str",
                detail: format!("expected freeze|reinitialize, got `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterventionPlan {
    pub kind: InterventionKind,
    pub target: BTreeSet<ParamTag>,
}

impl InterventionPlan {
    pub fn new(kind: InterventionKind, target: BTreeSet<ParamTag>) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::InvalidArgument {
                op: "InterventionPlan::new",
                detail: "target tag set must be nonempty".into(),
            });
        }
        Ok(InterventionPlan { kind, target })
    }
}

/// Tags of the given layers, optionally narrowed to one sublayer.
pub fn layer_target(
    tags: &[ParamTag],
    layers: &BTreeSet<u32>,
    sublayer: Option<Sublayer>,
) -> BTreeSet<ParamTag> {
    tags.iter()
        .filter(|t| t.layer_index.is_some_and(|l| layers.contains(&l)))
        .filter(|t| sublayer.is_none_or(|s| t.sublayer == s))
        .cloned()
        .collect()
}

/// The "only fine-tune the last k layers" freeze target: embeddings plus
/// every layer below the top k. The head is always left trainable — it is
/// fresh and untrained, so freezing it would make the run meaningless.
pub fn all_but_top_k_target(tags: &[ParamTag], num_layers: usize, k: usize) -> Result<BTreeSet<ParamTag>> {
    if k == 0 || k >= num_layers {
        return Err(Error::InvalidArgument {
            op: "all_but_top_k_target",
            detail: format!("k must be in 1..{num_layers}, got {k}"),
        });
    }
    let cut = (num_layers - k) as u32;
    Ok(tags
        .iter()
        .filter(|t| match t.sublayer {
            Sublayer::Embedding => true,
            Sublayer::Head => false,
            _ => t.layer_index.is_some_and(|l| l <= cut),
        })
        .cloned()
        .collect())
}

/// Register a freeze plan with the scheduler: target tags get K = 0 for
/// the rest of the run.
pub fn apply_freeze(plan: &InterventionPlan, params: &ModelParams, scheduler: &mut Scheduler) -> Result<()> {
    if plan.kind != InterventionKind::Freeze {
        return Err(Error::InvalidArgument {
            op: "apply_freeze",
            detail: format!("plan kind is {}, expected freeze", plan.kind),
        });
    }
    let known = params.tag_set();
    for t in &plan.target {
        if !known.contains(t) {
            return Err(Error::UnknownTag(t.name.clone()));
        }
    }
    scheduler.freeze(plan.target.iter().cloned());
    Ok(())
}

/// Re-draw the target tensors from the initializer. Only legal before the
/// first optimizer step (`steps_taken` = 0); re-initializing mid-run would
/// silently corrupt the optimizer moments.
pub fn apply_reinit(
    plan: &InterventionPlan,
    params: &mut ModelParams,
    seed: u64,
    steps_taken: u64,
) -> Result<()> {
    if plan.kind != InterventionKind::Reinitialize {
        return Err(Error::InvalidArgument {
            op: "apply_reinit",
            detail: format!("plan kind is {}, expected reinitialize", plan.kind),
        });
    }
    if steps_taken != 0 {
        return Err(Error::InvalidArgument {
            op: "apply_reinit",
            detail: format!("re-initialization is only allowed before training, {steps_taken} steps already taken"),
        });
    }
    params.reinitialize(&plan.target, seed)
}

// ── linear CKA ──────────────────────────────────────────────────────────

/// Linear CKA between two activation matrices with matching row counts:
/// `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F · ‖Yᶜᵀ Yᶜ‖_F)`, columns centered first.
/// Symmetric, 1 at X = Y, invariant to orthogonal column transforms and
/// isotropic scaling.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.len() != 2 || ys.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            detail: format!("inputs must be 2-D, got {xs:?} and {ys:?}"),
        });
    }
    let (n, d1, d2) = (xs[0], xs[1], ys[1]);
    if ys[0] != n {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            detail: format!("row counts differ: {n} vs {}", ys[0]),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument {
            op: "linear_cka",
            detail: format!("need at least 2 rows, got {n}"),
        });
    }

    let xc = center_columns(x.data(), n, d1);
    let yc = center_columns(y.data(), n, d2);

    // Gram-style cross products; ‖·‖_F via plain sums of squares.
    let mut xx = vec![0.0; d1 * d1];
    gemm(d1, n, d1, 1.0, &xc, 0, 1, d1 as isize, &xc, 0, d1 as isize, 1, 0.0, &mut xx, 0, d1 as isize, 1);
    let mut yy = vec![0.0; d2 * d2];
    gemm(d2, n, d2, 1.0, &yc, 0, 1, d2 as isize, &yc, 0, d2 as isize, 1, 0.0, &mut yy, 0, d2 as isize, 1);
    let mut yx = vec![0.0; d2 * d1];
    gemm(d2, n, d1, 1.0, &yc, 0, 1, d2 as isize, &xc, 0, d1 as isize, 1, 0.0, &mut yx, 0, d1 as isize, 1);

    let frob = |m: &[f64]| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (dx, dy) = (frob(&xx), frob(&yy));
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::DegenerateActivations(format!(
            "zero-variance input ({} rows identical)",
            if dx == 0.0 { "x" } else { "y" }
        )));
    }
    Ok(yx.iter().map(|v| v * v).sum::<f64>() / (dx * dy))
}

fn center_columns(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    out
}

// ── CKA tracking ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkaRecord {
    pub step: u64,
    pub layer_index: u32,
    pub similarity: f64,
}

/// How activation rows are formed before CKA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CkaPooling {
    /// One row per token position (batch x sequence flattened).
    #[default]
    TokenLevel,
    /// One row per sentence (mean over its positions).
    MeanPooled,
}

/// Compare per-layer activations of the pre-trained and the working model
/// on one batch. `layers` are 1-based indices; bodies must agree in shape
/// (heads may differ — activations are taken before the head).
pub fn track_cka(
    pretrained: &ModelParams,
    current: &ModelParams,
    batch: &Batch,
    layers: &[u32],
    step: u64,
    pooling: CkaPooling,
) -> Result<Vec<CkaRecord>> {
    let (a, b) = (pretrained.config(), current.config());
    if (a.num_layers, a.hidden_dim, a.num_heads, a.ff_dim, a.vocab_size, a.max_seq_len)
        != (b.num_layers, b.hidden_dim, b.num_heads, b.ff_dim, b.vocab_size, b.max_seq_len)
    {
        return Err(Error::InvalidConfig("CKA tracking needs models with identical bodies".into()));
    }
    for &l in layers {
        if l == 0 || l as usize > a.num_layers {
            return Err(Error::InvalidArgument {
                op: "track_cka",
                detail: format!("layer {l} out of range 1..={}", a.num_layers),
            });
        }
    }

    let pre = forward(pretrained, batch, &HeadRows::Cls)?;
    let cur = forward(current, batch, &HeadRows::Cls)?;

    let mut records = Vec::with_capacity(layers.len());
    for &l in layers {
        let (xa, xb) = (&pre.activations[l as usize - 1], &cur.activations[l as usize - 1]);
        let (xa, xb) = match pooling {
            CkaPooling::TokenLevel => (xa.clone(), xb.clone()),
            CkaPooling::MeanPooled => (pool_sentences(xa, &pre.bounds)?, pool_sentences(xb, &cur.bounds)?),
        };
        records.push(CkaRecord { step, layer_index: l, similarity: linear_cka(&xa, &xb)? });
    }
    Ok(records)
}

fn pool_sentences(acts: &Tensor, bounds: &[usize]) -> Result<Tensor> {
    let d = acts.shape()[1];
    let s = bounds.len() - 1;
    let mut out = vec![0.0; s * d];
    for (si, w) in bounds.windows(2).enumerate() {
        let len = (w[1] - w[0]) as f64;
        for i in w[0]..w[1] {
            for j in 0..d {
                out[si * d + j] += acts.data()[i * d + j] / len;
            }
        }
    }
    Tensor::new(vec![s, d], out)
}

// ── slope gate ──────────────────────────────────────────────────────────

/// Per-step mean similarity of the two highest layers present in the
/// records, in step order. Steps missing either layer are skipped.
pub fn last_two_layer_mean_series(records: &[CkaRecord]) -> Vec<f64> {
    let mut layers: BTreeSet<u32> = records.iter().map(|r| r.layer_index).collect();
    let hi = match layers.pop_last() {
        Some(l) => l,
        None => return Vec::new(),
    };
    let lo = layers.pop_last().unwrap_or(hi);
    let mut by_step: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in records {
        let slot = by_step.entry(r.step).or_default();
        if r.layer_index == hi {
            slot.1 = Some(r.similarity);
        } else if r.layer_index == lo {
            slot.0 = Some(r.similarity);
        }
    }
    by_step
        .values()
        .filter_map(|&(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            (None, Some(b)) if lo == hi => Some(b),
            _ => None,
        })
        .collect()
}

/// True iff the least-squares slope over the trailing `window` points of
/// the series is negative ("similarity still dropping"). Fewer than two
/// points in the window close the gate.
pub fn cka_slope_gate(series: &[f64], window: usize) -> bool {
    let tail = &series[series.len().saturating_sub(window)..];
    let n = tail.len();
    if n < 2 {
        return false;
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let y_mean = tail.iter().sum::<f64>() / n as f64;
    let num: f64 = tail.iter().enumerate().map(|(i, y)| (i as f64 - t_mean) * (y - y_mean)).sum();
    // The denominator Σ(t - t̄)² is positive for n ≥ 2; only the sign of
    // the slope matters.
    num < 0.0
}

// ── performance gap ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub step: u64,
    pub source_metric: f64,
    pub non_source_mean: f64,
    /// Always the stored `source_metric - non_source_mean`, bit-exactly.
    pub gap: f64,
}

/// Source-language metric minus the unweighted mean over the others.
pub fn performance_gap(results: &BTreeMap<u32, f64>, source: u32, step: u64) -> Result<GapRecord> {
    let source_metric = *results.get(&source).ok_or_else(|| Error::InvalidArgument {
        op: "performance_gap",
        detail: format!("results are missing the source language {source}"),
    })?;
    let others: Vec<f64> = results.iter().filter(|(&l, _)| l != source).map(|(_, &v)| v).collect();
    if others.is_empty() {
        return Err(Error::InvalidArgument {
            op: "performance_gap",
            detail: "need at least one non-source language".into(),
        });
    }
    let non_source_mean = others.iter().sum::<f64>() / others.len() as f64;
    Ok(GapRecord { step, source_metric, non_source_mean, gap: source_metric - non_source_mean })
}
