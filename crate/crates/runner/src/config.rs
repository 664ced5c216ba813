//! Experiment configuration: one TOML file, dotted-path CLI overrides,
//! and the resolution rule for the output root.
//!
//! The `[model]` section deliberately has no `vocab_size` or `head` key:
//! the vocabulary is owned by `[bench.grammar]` and the head is chosen by
//! the pipeline (masked-LM for pre-training, then swapped for the task),
//! so neither can drift out of sync.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use slowfast_core::bench::{BenchConfig, TaskKind};
use slowfast_core::model::{HeadKind, ModelConfig, Sublayer};
use slowfast_core::optim::AdamConfig;
use slowfast_core::schedule::PolicyConfig;

use crate::RunnerError;

/// Table 2's method rows: DF, NoisyTune, FS, FF and the combined method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineDf,
    #[serde(rename = "noisytune")]
    NoisyTune,
    SlowOnly,
    FastOnly,
    SlowAndFast,
}

impl Method {
    /// (slow, fast) scheduler flags.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Method::BaselineDf | Method::NoisyTune => (false, false),
            Method::SlowOnly => (true, false),
            Method::FastOnly => (false, true),
            Method::SlowAndFast => (true, true),
        }
    }

    pub const ALL: [Method; 5] =
        [Method::BaselineDf, Method::NoisyTune, Method::SlowOnly, Method::FastOnly, Method::SlowAndFast];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::BaselineDf => "baseline_df",
            Method::NoisyTune => "noisytune",
            Method::SlowOnly => "slow_only",
            Method::FastOnly => "fast_only",
            Method::SlowAndFast => "slow_and_fast",
        })
    }
}

impl FromStr for Method {
    type Err = RunnerError;
    fn from_str(s: &str) -> Result<Self, RunnerError> {
        match s {
            "baseline_df" => Ok(Method::BaselineDf),
            "noisytune" => Ok(Method::NoisyTune),
            "slow_only" => Ok(Method::SlowOnly),
            "fast_only" => Ok(Method::FastOnly),
            "slow_and_fast" => Ok(Method::SlowAndFast),
            other => Err(RunnerError::config(format!(
                "unknown method `{other}` (expected baseline_df, noisytune, slow_only, fast_only or slow_and_fast)"
            ))),
        }
    }
}

/// Transformer dimensions; vocabulary size comes from the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { num_layers: 4, hidden_dim: 48, num_heads: 4, ff_dim: 96, max_seq_len: 40 }
    }
}

impl ModelSection {
    pub fn to_model_config(self, vocab_size: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub mask_rate: f64,
    pub mask_random_rate: f64,
    pub mask_keep_rate: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 3000,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 100,
            mask_rate: 0.15,
            mask_random_rate: 0.1,
            mask_keep_rate: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            steps: 400,
            batch_size: 16,
            base_lr: 5e-4,
            warmup_steps: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Freeze or re-initialize a slice of the model around the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    /// "freeze" or "reinitialize".
    pub kind: String,
    /// 1-based layer indices; mutually exclusive with `all_but_top_k`.
    #[serde(default)]
    pub layers: Vec<u32>,
    /// Restrict `layers` to one sublayer: "attention" or "feed_forward".
    #[serde(default)]
    pub sublayer: Option<String>,
    /// Target embeddings plus every layer except the top k (the head
    /// stays trainable): the "fine-tune only the last k layers" harness.
    #[serde(default)]
    pub all_but_top_k: Option<usize>,
}

impl InterventionSection {
    pub fn parsed_sublayer(&self) -> Result<Option<Sublayer>, RunnerError> {
        match self.sublayer.as_deref() {
            None => Ok(None),
            Some("attention") => Ok(Some(Sublayer::Attention)),
            Some("feed_forward") => Ok(Some(Sublayer::FeedForward)),
            Some(other) => Err(RunnerError::config(format!(
                "unknown sublayer `{other}` (expected attention or feed_forward)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.kind != "freeze" && self.kind != "reinitialize" && self.kind != "reinit" {
            return Err(RunnerError::config(format!(
                "unknown intervention kind `{}` (expected freeze or reinitialize)",
                self.kind
            )));
        }
        match (self.layers.is_empty(), self.all_but_top_k) {
            (false, Some(_)) => Err(RunnerError::config(
                "intervention: `layers` and `all_but_top_k` are mutually exclusive".into(),
            )),
            (true, None) => Err(RunnerError::config(
                "intervention: set `layers` or `all_but_top_k`".into(),
            )),
            _ => {
                if self.all_but_top_k.is_some() && self.sublayer.is_some() {
                    return Err(RunnerError::config(
                        "intervention: `sublayer` only applies to `layers` targets".into(),
                    ));
                }
                self.parsed_sublayer().map(|_| ())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub method: Method,
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    /// Few-shot examples mixed in per non-source language (Table 2's M).
    pub m_few_shot: usize,
    /// Validation / CKA / gap cadence in update steps (the paper's "every
    /// hundred updates", scaled with window_size at desk scale).
    pub eval_every: u64,
    /// Trailing points for the CKA slope gate.
    pub cka_smoothing: usize,
    pub noisytune_lambda: f64,
    pub eval_batch_size: usize,
    pub intervention: Option<InterventionSection>,
    /// Output root when neither `--out` nor the environment variable is
    /// set.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            method: Method::BaselineDf,
            task: TaskKind::Classification,
            seeds: vec![1, 2, 3, 4],
            m_few_shot: 0,
            eval_every: 20,
            cka_smoothing: 5,
            noisytune_lambda: 0.15,
            eval_batch_size: 64,
            intervention: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunnerConfig {
    /// Experiment name; the output subdirectory.
    pub name: String,
    pub model: ModelSection,
    pub bench: BenchConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub experiment: ExperimentSection,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            name: "experiment".into(),
            model: ModelSection::default(),
            bench: BenchConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunnerConfig {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(RunnerError::config(format!(
                "experiment name `{}` must be non-empty and path-separator free",
                self.name
            )));
        }
        self.bench.validate().map_err(RunnerError::from_core)?;
        self.policy.validate().map_err(RunnerError::from_core)?;
        if self.experiment.seeds.is_empty() {
            return Err(RunnerError::config("experiment.seeds must be non-empty".into()));
        }
        if self.experiment.eval_every == 0 {
            return Err(RunnerError::config("experiment.eval_every must be >= 1".into()));
        }
        if self.experiment.cka_smoothing < 2 {
            return Err(RunnerError::config("experiment.cka_smoothing must be >= 2".into()));
        }
        if self.experiment.eval_batch_size == 0 {
            return Err(RunnerError::config("experiment.eval_batch_size must be >= 1".into()));
        }
        if let Some(iv) = &self.experiment.intervention {
            iv.validate()?;
            let l = self.model.num_layers as u32;
            for &layer in &iv.layers {
                if layer == 0 || layer > l {
                    return Err(RunnerError::config(format!(
                        "intervention layer {layer} out of range 1..={l}"
                    )));
                }
            }
            if let Some(k) = iv.all_but_top_k {
                if k == 0 || k >= self.model.num_layers {
                    return Err(RunnerError::config(format!(
                        "all_but_top_k = {k} must be in 1..{}",
                        self.model.num_layers
                    )));
                }
            }
        }
        // The model must be able to ingest the longest possible sentence:
        // CLS + content + one anchor per content token.
        let g = &self.bench.grammar;
        let longest = 1 + 2 * g.max_content_len;
        if self.model.max_seq_len < longest {
            return Err(RunnerError::config(format!(
                "max_seq_len {} cannot hold the longest sentence ({longest} tokens)",
                self.model.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Parse `section.key=value` into (dotted path, raw value).
fn split_override(raw: &str) -> Result<(&str, &str), RunnerError> {
    raw.split_once('=').map(|(k, v)| (k.trim(), v.trim())).filter(|(k, _)| !k.is_empty()).ok_or_else(
        || RunnerError::config(format!("override `{raw}` is not of the form section.key=value")),
    )
}

/// Interpret an override value with TOML literal syntax (`10`, `0.5`,
/// `true`, `inf`, `[1, 2]`, `"quoted"`); anything that does not parse is
/// taken as a bare string, so `--set experiment.method=slow_only` works
/// without quoting.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), RunnerError> {
    let mut cursor = table;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                RunnerError::config(format!("override path `{path}`: `{seg}` is not a table"))
            })?;
    }
    cursor.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Load a TOML config and apply `--set` overrides in order.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunnerConfig, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunnerError::config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| RunnerError::config(format!("{}: {e}", path.display())))?;
    for raw in overrides {
        let (key, value) = split_override(raw)?;
        apply_override(&mut table, key, parse_override_value(value))?;
    }
    let config: RunnerConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| RunnerError::config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Output root: `--out` flag, else `SLOWFAST_OUT`, else the config's
/// `experiment.output_dir`, else `./runs`.
pub const OUTPUT_ENV_VAR: &str = "SLOWFAST_OUT";

pub fn resolve_output_root(flag: Option<&Path>, config: &RunnerConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUTPUT_ENV_VAR) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    config.experiment.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn defaults_fill_every_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "name = \"t\"\n");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.name, "t");
        assert_eq!(cfg.policy.c1, 0.01);
        assert_eq!(cfg.policy.c2, 10.0);
        assert_eq!(cfg.policy.r_exp, 3);
        assert_eq!(cfg.policy.tau, 0.1);
        assert_eq!(cfg.experiment.m_few_shot, 0);
        assert_eq!(cfg.experiment.seeds, vec![1, 2, 3, 4]);
        assert_eq!(cfg.experiment.method, Method::BaselineDf);
    }

    #[test]
    fn overrides_reach_nested_keys_with_types() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "name = \"t\"\n[policy]\nc1 = 0.5\n");
        let cfg = load_config(
            &path,
            &[
                "policy.c1=0.001".into(),
                "policy.tau=inf".into(),
                "experiment.method=slow_and_fast".into(),
                "experiment.seeds=[7, 9]".into(),
                "bench.grammar.anchor_prob=0.75".into(),
                "model.num_layers=6".into(),
                "name=renamed".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.policy.c1, 0.001);
        assert!(cfg.policy.tau.is_infinite());
        assert_eq!(cfg.experiment.method, Method::SlowAndFast);
        assert_eq!(cfg.experiment.seeds, vec![7, 9]);
        assert_eq!(cfg.bench.grammar.anchor_prob, 0.75);
        assert_eq!(cfg.model.num_layers, 6);
        assert_eq!(cfg.name, "renamed");
    }

    #[test]
    fn later_overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "name = \"t\"\n");
        let cfg =
            load_config(&path, &["policy.c2=2.0".into(), "policy.c2=4.0".into()]).unwrap();
        assert_eq!(cfg.policy.c2, 4.0);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        // Unknown key.
        let path = write_config(dir.path(), "name = \"t\"\n[model]\nnum_heds = 2\n");
        assert!(load_config(&path, &[]).is_err());
        // Malformed override.
        let path = write_config(dir.path(), "name = \"t\"\n");
        assert!(load_config(&path, &["policy.c1".into()]).is_err());
        // Core-level validation failure (c1 > 1).
        assert!(load_config(&path, &["policy.c1=3.0".into()]).is_err());
        // Invalid method string.
        assert!(load_config(&path, &["experiment.method=fancy".into()]).is_err());
        // Sequence length too small for the grammar.
        assert!(load_config(&path, &["model.max_seq_len=8".into()]).is_err());
        // Missing file.
        assert!(load_config(&dir.path().join("absent.toml"), &[]).is_err());
    }

    #[test]
    fn intervention_section_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "name = \"t\"\n[experiment.intervention]\nkind = \"freeze\"\nlayers = [1, 2]\nsublayer = \"feed_forward\"\n",
        );
        let cfg = load_config(&path, &[]).unwrap();
        let iv = cfg.experiment.intervention.unwrap();
        assert_eq!(iv.kind, "freeze");
        assert_eq!(iv.layers, vec![1, 2]);
        assert_eq!(iv.parsed_sublayer().unwrap(), Some(Sublayer::FeedForward));

        let path = write_config(
            dir.path(),
            "name = \"t\"\n[experiment.intervention]\nkind = \"freeze\"\nall_but_top_k = 1\n",
        );
        assert!(load_config(&path, &[]).is_ok());
        // Both targets at once is rejected.
        let path = write_config(
            dir.path(),
            "name = \"t\"\n[experiment.intervention]\nkind = \"freeze\"\nlayers = [1]\nall_but_top_k = 1\n",
        );
        assert!(load_config(&path, &[]).is_err());
        // Layer out of range (default model has 4 layers).
        let path = write_config(
            dir.path(),
            "name = \"t\"\n[experiment.intervention]\nkind = \"freeze\"\nlayers = [9]\n",
        );
        assert!(load_config(&path, &[]).is_err());
    }

    #[test]
    fn output_root_resolution_order() {
        let cfg = RunnerConfig { ..Default::default() };
        let flagged = resolve_output_root(Some(Path::new("/tmp/x")), &cfg);
        assert_eq!(flagged, PathBuf::from("/tmp/x"));
        let mut with_dir = cfg.clone();
        with_dir.experiment.output_dir = Some(PathBuf::from("cfg-out"));
        // Environment handling is exercised end-to-end in the CLI tests;
        // here the var is assumed unset under `cargo test`.
        if std::env::var_os(OUTPUT_ENV_VAR).is_none() {
            assert_eq!(resolve_output_root(None, &with_dir), PathBuf::from("cfg-out"));
            assert_eq!(resolve_output_root(None, &cfg), PathBuf::from("runs"));
        }
    }
}
