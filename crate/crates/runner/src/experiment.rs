//! The experiment pipeline: pre-train (cached) → intervene → fine-tune
//! with cadenced evaluation, CKA tracking and gap recording → test the
//! best-validation checkpoint.
//!
//! Per-seed outputs under `<out>/<name>/seed<k>/`:
//!   `gap.csv`           step, per-language validation metric, gap
//!   `cka.csv`           step, layer, similarity to the pre-trained model
//!   `policy_trace.csv`  step, phase, phi, K_S1, K_S2, K_V2
//!   `summary.json`      the seed's [`SeedRun`]
//!   `best.ckpt`         parameters at the best-validation step
//! plus `FAILED` (with the error text) if the run aborts mid-way; earlier
//! outputs are kept for inspection. The experiment-level `summary.json`
//! aggregates all seeds and is byte-identical across reruns of the same
//! config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use slowfast_core::bench::{
    evaluate, make_languages, make_task, pretrain_corpus, DataSplit, SyntheticLanguage, TaskKind,
    MASK, NUM_CLASSES, NUM_SPECIALS, NUM_TAGS,
};
use slowfast_core::checkpoint::{load_checkpoint, save_checkpoint};
use slowfast_core::model::{build_model, with_head, HeadKind, ModelParams, PretrainConfig};
use slowfast_core::probe::{
    all_but_top_k_target, apply_freeze, apply_reinit, cka_slope_gate, last_two_layer_mean_series,
    layer_target, performance_gap, track_cka, CkaPooling, CkaRecord, InterventionKind,
    InterventionPlan,
};
use slowfast_core::schedule::{assign_weight_sets, Scheduler};
use slowfast_core::train::{FineTuneConfig, FineTuner};

use crate::config::{InterventionSection, Method, RunnerConfig};
use crate::{Result, RunnerError};

/// One seed's outcome; the per-seed `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Step whose parameters won model selection (best mean validation
    /// metric over all languages; earliest step on ties).
    pub best_step: u64,
    /// Per-language validation metric at the best step.
    pub validation: BTreeMap<u32, f64>,
    /// Per-language test metric of the selected checkpoint.
    pub test: BTreeMap<u32, f64>,
    pub source_metric: f64,
    pub non_source_mean: f64,
    pub gap: f64,
}

/// Experiment-level `summary.json`: per-seed finals plus their mean and
/// sample standard deviation (recomputable from the stored values).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub task: TaskKind,
    pub m_few_shot: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedRun>,
    pub mean_source: f64,
    pub std_source: f64,
    pub mean_non_source: f64,
    pub std_non_source: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
}

/// Mean and sample standard deviation (n−1; 0 for fewer than 2 values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn task_head(task: TaskKind) -> HeadKind {
    match task {
        TaskKind::Classification => HeadKind::Classification { num_classes: NUM_CLASSES },
        TaskKind::Tagging => HeadKind::Tagging { num_tags: NUM_TAGS },
    }
}

/// Cache key for a pre-trained body: everything that influences its
/// bytes — model dimensions, grammar + corpus sizes, the pre-training
/// recipe and the seed.
fn pretrain_cache_key(cfg: &RunnerConfig, seed: u64) -> Result<String> {
    let model = cfg.model.to_model_config(cfg.bench.grammar.vocab_size, HeadKind::MaskedLm);
    let key = serde_json::json!({
        "model": model,
        "bench": cfg.bench,
        "pretrain": cfg.pretrain,
        "seed": seed,
    });
    let bytes = serde_json::to_vec(&key)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

fn pretrain_config(cfg: &RunnerConfig, seed: u64) -> PretrainConfig {
    PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        base_lr: cfg.pretrain.base_lr,
        warmup_steps: cfg.pretrain.warmup_steps,
        adam: cfg.pretrain.adam,
        mask_rate: cfg.pretrain.mask_rate,
        mask_random_rate: cfg.pretrain.mask_random_rate,
        mask_keep_rate: cfg.pretrain.mask_keep_rate,
        mask_token: MASK,
        maskable_min_id: NUM_SPECIALS as u32,
        seed,
    }
}

/// Load the pre-trained body for `seed` from the shared cache, or pre-train
/// and cache it. The cache lives at `<out_root>/pretrained/<hash>.ckpt` and
/// is shared by every experiment with the same world and recipe, so a
/// five-method comparison pre-trains each seed once.
pub fn pretrained_body(
    cfg: &RunnerConfig,
    languages: &[SyntheticLanguage],
    seed: u64,
    out_root: &Path,
) -> Result<ModelParams> {
    let key = pretrain_cache_key(cfg, seed)?;
    let dir = out_root.join("pretrained");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{key}.ckpt"));
    if path.exists() {
        let ckpt = load_checkpoint(&path).map_err(RunnerError::from_core)?;
        return Ok(ckpt.params);
    }
    let model_cfg = cfg.model.to_model_config(cfg.bench.grammar.vocab_size, HeadKind::MaskedLm);
    let mut params = build_model(&model_cfg, seed).map_err(RunnerError::from_core)?;
    let corpus = pretrain_corpus(&cfg.bench, languages).map_err(RunnerError::from_core)?;
    slowfast_core::model::pretrain_mlm(&mut params, &corpus, &pretrain_config(cfg, seed))
        .map_err(RunnerError::from_core)?;
    // Write-then-rename so a crashed run never leaves a torn cache entry.
    let tmp = dir.join(format!("{key}.ckpt.tmp{seed}"));
    save_checkpoint(&tmp, &params, cfg.pretrain.steps, None).map_err(RunnerError::from_core)?;
    fs::rename(&tmp, &path)?;
    Ok(params)
}

/// Ensure the pre-trained cache entry exists for every seed; returns the
/// checkpoint paths in seed order (the `pretrain` subcommand).
pub fn ensure_pretrained(cfg: &RunnerConfig, out_root: &Path) -> Result<Vec<PathBuf>> {
    let languages =
        make_languages(cfg.bench.num_languages, &cfg.bench.grammar, cfg.bench.seed)?;
    let mut paths = Vec::new();
    for &seed in &cfg.experiment.seeds {
        pretrained_body(cfg, &languages, seed, out_root)?;
        let key = pretrain_cache_key(cfg, seed)?;
        paths.push(out_root.join("pretrained").join(format!("{key}.ckpt")));
    }
    Ok(paths)
}

fn build_intervention_plan(
    section: &InterventionSection,
    params: &ModelParams,
    num_layers: usize,
) -> Result<InterventionPlan> {
    let kind = match section.kind.as_str() {
        "freeze" => InterventionKind::Freeze,
        _ => InterventionKind::Reinitialize,
    };
    let tags = params.tags();
    let target = if let Some(k) = section.all_but_top_k {
        all_but_top_k_target(&tags, num_layers, k)?
    } else {
        let layers = section.layers.iter().copied().collect();
        layer_target(&tags, &layers, section.parsed_sublayer()?)
    };
    InterventionPlan::new(kind, target).map_err(RunnerError::from_core)
}

struct CsvWriter {
    file: std::io::BufWriter<fs::File>,
}

impl CsvWriter {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(file, "{header}")?;
        Ok(CsvWriter { file })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(","))?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// The per-seed pipeline. `languages` and `split` are the shared world;
/// only training randomness varies with `seed`.
fn run_seed(
    cfg: &RunnerConfig,
    languages: &[SyntheticLanguage],
    split: &DataSplit,
    seed: u64,
    seed_dir: &Path,
    out_root: &Path,
) -> Result<SeedRun> {
    let task = cfg.experiment.task;
    let num_layers = cfg.model.num_layers;
    let pretrained = pretrained_body(cfg, languages, seed, out_root)?;

    let mut params =
        with_head(&pretrained, task_head(task), seed ^ 0x6865_6164).map_err(RunnerError::from_core)?;
    if cfg.experiment.method == Method::NoisyTune {
        slowfast_core::schedule::noisytune_perturb(
            &mut params,
            cfg.experiment.noisytune_lambda,
            seed ^ 0x6e6f_6973,
        )
        .map_err(RunnerError::from_core)?;
    }

    let (slow, fast) = cfg.experiment.method.flags();
    let assignment =
        assign_weight_sets(num_layers, &params.tags(), cfg.policy.embedding_in_s1)
            .map_err(RunnerError::from_core)?;
    let mut scheduler =
        Scheduler::new(cfg.policy, assignment, slow, fast).map_err(RunnerError::from_core)?;

    if let Some(section) = &cfg.experiment.intervention {
        let plan = build_intervention_plan(section, &params, num_layers)?;
        match plan.kind {
            InterventionKind::Freeze => {
                apply_freeze(&plan, &params, &mut scheduler).map_err(RunnerError::from_core)?
            }
            InterventionKind::Reinitialize => {
                apply_reinit(&plan, &mut params, seed ^ 0x7265_696e, 0)
                    .map_err(RunnerError::from_core)?
            }
        }
    }

    let ft_cfg = FineTuneConfig {
        steps: cfg.finetune.steps,
        batch_size: cfg.finetune.batch_size,
        base_lr: cfg.finetune.base_lr,
        warmup_steps: cfg.finetune.warmup_steps,
        adam: cfg.finetune.adam,
        seed,
    };
    let mut tuner = FineTuner::new(params, scheduler, task, split.train.clone(), &ft_cfg)
        .map_err(RunnerError::from_core)?;

    let lang_ids: Vec<u32> = (0..cfg.bench.num_languages as u32).collect();
    let gap_header = {
        let mut cols = vec!["step".to_string()];
        cols.extend(lang_ids.iter().map(|id| format!("lang{id}")));
        cols.push("gap".into());
        cols.join(",")
    };
    let mut gap_csv = CsvWriter::create(&seed_dir.join("gap.csv"), &gap_header)?;
    let mut cka_csv = CsvWriter::create(&seed_dir.join("cka.csv"), "step,layer,similarity")?;

    let eval_batch = cfg.experiment.eval_batch_size;
    let write_gap_row = |csv: &mut CsvWriter, step: u64, metrics: &BTreeMap<u32, f64>| -> Result<f64> {
        let record = performance_gap(metrics, 0, step).map_err(RunnerError::from_core)?;
        let mut fields = vec![step.to_string()];
        fields.extend(lang_ids.iter().map(|id| fmt_f64(metrics[id])));
        fields.push(fmt_f64(record.gap));
        csv.row(&fields)?;
        Ok(record.gap)
    };

    // Step-0 snapshot: the untouched (or just-intervened) model.
    let val0 = evaluate(tuner.params(), &split.validation, task, eval_batch)
        .map_err(RunnerError::from_core)?;
    write_gap_row(&mut gap_csv, 0, &val0)?;
    let mean0 = val0.values().sum::<f64>() / val0.len() as f64;
    let mut best = (mean0, 0u64, tuner.params().clone(), val0);

    let cka_layers: Vec<u32> = (1..=num_layers as u32).collect();
    let mut cka_records: Vec<CkaRecord> = Vec::new();

    for step in 1..=cfg.finetune.steps {
        tuner.step().map_err(RunnerError::from_core)?;
        if step % cfg.experiment.eval_every != 0 && step != cfg.finetune.steps {
            continue;
        }
        let val = evaluate(tuner.params(), &split.validation, task, eval_batch)
            .map_err(RunnerError::from_core)?;
        write_gap_row(&mut gap_csv, step, &val)?;

        // CKA against the pre-trained body on the current data batch.
        let batch = tuner.last_batch().expect("stepped at least once").clone();
        let records = track_cka(
            &pretrained,
            tuner.params(),
            &batch,
            &cka_layers,
            step,
            CkaPooling::TokenLevel,
        )
        .map_err(RunnerError::from_core)?;
        for r in &records {
            cka_csv.row(&[r.step.to_string(), r.layer_index.to_string(), fmt_f64(r.similarity)])?;
        }
        cka_records.extend(records);
        let series = last_two_layer_mean_series(&cka_records);
        let still_dropping = cka_slope_gate(&series, cfg.experiment.cka_smoothing);
        tuner.scheduler_mut().set_cka_gate(still_dropping);

        let mean = val.values().sum::<f64>() / val.len() as f64;
        if mean > best.0 {
            best = (mean, step, tuner.params().clone(), val);
        }
    }
    gap_csv.finish()?;
    cka_csv.finish()?;

    let mut trace_csv =
        CsvWriter::create(&seed_dir.join("policy_trace.csv"), "step,phase,phi,k_s1,k_s2,k_v2")?;
    for row in tuner.scheduler().trace() {
        trace_csv.row(&[
            row.step.to_string(),
            row.phase.to_string(),
            row.phi.map(fmt_f64).unwrap_or_default(),
            fmt_f64(row.k_s1),
            fmt_f64(row.k_s2),
            fmt_f64(row.k_v2),
        ])?;
    }
    trace_csv.finish()?;

    let (_, best_step, best_params, validation) = best;
    save_checkpoint(&seed_dir.join("best.ckpt"), &best_params, best_step, None)
        .map_err(RunnerError::from_core)?;
    let test = evaluate(&best_params, &split.test, task, eval_batch).map_err(RunnerError::from_core)?;
    let record = performance_gap(&test, 0, best_step).map_err(RunnerError::from_core)?;

    let run = SeedRun {
        seed,
        best_step,
        validation,
        test,
        source_metric: record.source_metric,
        non_source_mean: record.non_source_mean,
        gap: record.gap,
    };
    let mut f = fs::File::create(seed_dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&run)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(run)
}

/// Run every seed of an experiment and aggregate. Mid-run failures leave
/// completed outputs in place and drop a `FAILED` marker (with the error
/// text) into the failing seed's directory before the error propagates.
pub fn run_experiment(cfg: &RunnerConfig, out_root: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let exp_dir = out_root.join(&cfg.name);
    fs::create_dir_all(&exp_dir)?;
    fs::write(
        exp_dir.join("config.toml"),
        toml::to_string_pretty(cfg).map_err(|e| RunnerError::config(e.to_string()))?,
    )?;

    let languages =
        make_languages(cfg.bench.num_languages, &cfg.bench.grammar, cfg.bench.seed)?;
    let split = make_task(&cfg.bench, &languages, cfg.experiment.task, cfg.experiment.m_few_shot)?;

    let mut per_seed = Vec::with_capacity(cfg.experiment.seeds.len());
    for &seed in &cfg.experiment.seeds {
        let seed_dir = exp_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir)?;
        match run_seed(cfg, &languages, &split, seed, &seed_dir, out_root) {
            Ok(run) => per_seed.push(run),
            Err(e) => {
                let _ = fs::write(seed_dir.join("FAILED"), format!("{e}\n"));
                return Err(e);
            }
        }
    }

    let sources: Vec<f64> = per_seed.iter().map(|r| r.source_metric).collect();
    let non_sources: Vec<f64> = per_seed.iter().map(|r| r.non_source_mean).collect();
    let gaps: Vec<f64> = per_seed.iter().map(|r| r.gap).collect();
    let (mean_source, std_source) = mean_std(&sources);
    let (mean_non_source, std_non_source) = mean_std(&non_sources);
    let (mean_gap, std_gap) = mean_std(&gaps);
    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.experiment.method,
        task: cfg.experiment.task,
        m_few_shot: cfg.experiment.m_few_shot,
        seeds: cfg.experiment.seeds.clone(),
        per_seed,
        mean_source,
        std_source,
        mean_non_source,
        std_non_source,
        mean_gap,
        std_gap,
    };
    let mut f = fs::File::create(exp_dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(summary)
}
