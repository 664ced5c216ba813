//! A micro pre-LN transformer encoder with tagged parameters.
//!
//! Every parameter tensor carries a [`ParamTag`] naming its layer and
//! sublayer. Tags are the vocabulary the scheduler and the probes speak:
//! weight-set assignment, freezing, re-initialization and the policy trace
//! all address parameters by tag, never by position in a buffer.
//!
//! Block structure (pre-LN):
//!
//! ```text
//! x = embed(tokens) + embed(positions)
//! for each layer:  x = x + Wo * MHSA(LN_a(x));  x = x + FF(LN_f(x))
//! head: select rows -> LN_h -> linear
//! ```
//!
//! `FF(z) = W2 * gelu(W1 * z + b1) + b2`. Layer norms and biases belong to
//! the sublayer they feed, so freezing "attention of layer 3" freezes its
//! norm and biases too. The embedding tables and the head carry their own
//! tags and never participate in layer arithmetic.
//!
//! Batches are ragged: sentences are flattened to one `[N, d]` token
//! matrix plus prefix bounds, and attention is blocked per sentence, so
//! there is no padding anywhere.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{AdamConfig, Optimizer, ParamUpdate};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

// ── tags ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Attention,
    FeedForward,
    Embedding,
    Head,
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Sublayer::Attention => "attention",
            Sublayer::FeedForward => "feed_forward",
            Sublayer::Embedding => "embedding",
            Sublayer::Head => "head",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Sublayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Sublayer::Attention),
            "feed_forward" => Ok(Sublayer::FeedForward),
            "embedding" => Ok(Sublayer::Embedding),
            "head" => Ok(Sublayer::Head),
            other => Err(Error::Format(format!("unknown sublayer `{other}`"))),
        }
    }
}

/// Identity of one parameter tensor. `layer_index` is 1-based and present
/// exactly for transformer-layer sublayers (attention / feed-forward).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamTag {
    pub name: String,
    pub layer_index: Option<u32>,
    pub sublayer: Sublayer,
}

impl fmt::Display for ParamTag {
    /// Formats as a manifest row: `name,layer_index,sublayer`, with `-`
    /// for tensors outside the layer stack.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer_index {
            Some(i) => write!(f, "{},{},{}", self.name, i, self.sublayer),
            None => write!(f, "{},-,{}", self.name, self.sublayer),
        }
    }
}

impl ParamTag {
    fn layer(name: String, layer: u32, sublayer: Sublayer) -> Self {
        ParamTag { name, layer_index: Some(layer), sublayer }
    }

    fn global(name: &str, sublayer: Sublayer) -> Self {
        ParamTag { name: name.to_string(), layer_index: None, sublayer }
    }

    /// Parse one `name,layer_index,sublayer` manifest row (`-` for no layer).
    pub fn parse(row: &str) -> Result<Self> {
        let parts: Vec<&str> = row.split(',').collect();
        let [name, layer, sublayer] = parts[..] else {
            return Err(Error::Format(format!("bad tag row `{row}`")));
        };
        let layer_index = match layer {
            "-" => None,
            n => Some(n.parse::<u32>().map_err(|_| Error::Format(format!("bad layer in `{row}`")))?),
        };
        Ok(ParamTag { name: name.to_string(), layer_index, sublayer: sublayer.parse()? })
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    MaskedLm,
    Classification { num_classes: usize },
    Tagging { num_tags: usize },
}

impl HeadKind {
    pub fn output_dim(&self, vocab_size: usize) -> usize {
        match *self {
            HeadKind::MaskedLm => vocab_size,
            HeadKind::Classification { num_classes } => num_classes,
            HeadKind::Tagging { num_tags } => num_tags,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    /// The desk-scale default used throughout the benchmark experiments.
    pub fn desk_scale(head: HeadKind) -> Self {
        ModelConfig {
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            vocab_size: 512,
            max_seq_len: 32,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 || self.max_seq_len < 2 || self.vocab_size < 8 {
            return Err(Error::InvalidConfig(
                "ff_dim must be positive, max_seq_len >= 2, vocab_size >= 8".into(),
            ));
        }
        let out = self.head.output_dim(self.vocab_size);
        if out < 2 {
            return Err(Error::InvalidConfig(format!("head output dim must be >= 2, got {out}")));
        }
        Ok(())
    }
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Parameter {
    pub tag: ParamTag,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Parameter>,
}

enum InitKind {
    Gaussian,
    Zeros,
    Ones,
}

/// Canonical tensor roster for a config: (name, layer, sublayer, shape, init).
fn roster(config: &ModelConfig) -> Vec<(ParamTag, Vec<usize>, InitKind)> {
    let d = config.hidden_dim;
    let ff = config.ff_dim;
    let mut out = vec![
        (ParamTag::global("embed.tok", Sublayer::Embedding), vec![config.vocab_size, d], InitKind::Gaussian),
        (ParamTag::global("embed.pos", Sublayer::Embedding), vec![config.max_seq_len, d], InitKind::Gaussian),
    ];
    for l in 1..=config.num_layers as u32 {
        let a = |n: &str| ParamTag::layer(format!("layer{l}.attn.{n}"), l, Sublayer::Attention);
        let f = |n: &str| ParamTag::layer(format!("layer{l}.ff.{n}"), l, Sublayer::FeedForward);
        out.extend([
            (a("ln.g"), vec![d], InitKind::Ones),
            (a("ln.b"), vec![d], InitKind::Zeros),
            (a("wq"), vec![d, d], InitKind::Gaussian),
            (a("bq"), vec![d], InitKind::Zeros),
            (a("wk"), vec![d, d], InitKind::Gaussian),
            (a("bk"), vec![d], InitKind::Zeros),
            (a("wv"), vec![d, d], InitKind::Gaussian),
            (a("bv"), vec![d], InitKind::Zeros),
            (a("wo"), vec![d, d], InitKind::Gaussian),
            (a("bo"), vec![d], InitKind::Zeros),
            (f("ln.g"), vec![d], InitKind::Ones),
            (f("ln.b"), vec![d], InitKind::Zeros),
            (f("w1"), vec![d, ff], InitKind::Gaussian),
            (f("b1"), vec![ff], InitKind::Zeros),
            (f("w2"), vec![ff, d], InitKind::Gaussian),
            (f("b2"), vec![d], InitKind::Zeros),
        ]);
    }
    let h = |n: &str| ParamTag::global(&format!("head.{n}"), Sublayer::Head);
    out.extend([
        (h("ln.g"), vec![d], InitKind::Ones),
        (h("ln.b"), vec![d], InitKind::Zeros),
        (h("w"), vec![d, config.head.output_dim(config.vocab_size)], InitKind::Gaussian),
        (h("b"), vec![config.head.output_dim(config.vocab_size)], InitKind::Zeros),
    ]);
    out
}

/// Build a freshly initialized model. Gaussian weights (std 0.02), zero
/// biases, unit layer-norm gains; all draws come from one ChaCha8 stream
/// in roster order, so a seed pins every parameter.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = roster(config)
        .into_iter()
        .map(|(tag, shape, init)| {
            let value = match init {
                InitKind::Gaussian => Tensor::randn(shape, INIT_STD, &mut rng),
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::filled(shape, 1.0),
            };
            Parameter { tag, value }
        })
        .collect();
    Ok(ModelParams { config: *config, params })
}

/// Swap the head for a new task: body tensors are kept, the head (and its
/// norm) is freshly initialized from `seed`.
pub fn with_head(params: &ModelParams, head: HeadKind, seed: u64) -> Result<ModelParams> {
    let config = ModelConfig { head, ..params.config };
    let mut fresh = build_model(&config, seed)?;
    for p in &mut fresh.params {
        if p.tag.sublayer != Sublayer::Head {
            let old = params.get(&p.tag.name).expect("body roster must match");
            p.value = old.value.clone();
        }
    }
    Ok(fresh)
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.tag.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.tag.name == name)
    }

    pub fn tags(&self) -> Vec<ParamTag> {
        self.params.iter().map(|p| p.tag.clone()).collect()
    }

    pub fn tag_set(&self) -> BTreeSet<ParamTag> {
        self.params.iter().map(|p| p.tag.clone()).collect()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Text manifest, one `name,layer_index,sublayer` row per tensor in
    /// roster order (`-` marks tensors outside the layer stack).
    pub fn tag_manifest(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            s.push_str(&p.tag.to_string());
            s.push('\n');
        }
        s
    }

    /// Re-draw the targeted tensors from the init distribution (seeded);
    /// everything else is untouched.
    pub fn reinitialize(&mut self, targets: &BTreeSet<ParamTag>, seed: u64) -> Result<()> {
        let known = self.tag_set();
        for t in targets {
            if !known.contains(t) {
                return Err(Error::UnknownTag(t.name.clone()));
            }
        }
        let fresh = build_model(&self.config, seed)?;
        for (p, f) in self.params.iter_mut().zip(fresh.params) {
            if targets.contains(&p.tag) {
                p.value = f.value;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Parse a full tag manifest (one row per line).
pub fn parse_tag_manifest(text: &str) -> Result<Vec<ParamTag>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(ParamTag::parse).collect()
}

// ── batches and the forward graph ───────────────────────────────────────

/// A ragged batch of token sentences. By convention every sentence starts
/// with the CLS token; the model itself only requires non-empty sentences
/// within `max_seq_len`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub sentences: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(sentences: Vec<Vec<u32>>) -> Self {
        Batch { sentences }
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    fn flatten(&self, config: &ModelConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        if self.sentences.is_empty() {
            return Err(Error::InvalidArgument { op: "forward", detail: "empty batch".into() });
        }
        let mut tokens = Vec::with_capacity(self.num_tokens());
        let mut positions = Vec::with_capacity(self.num_tokens());
        let mut bounds = Vec::with_capacity(self.sentences.len() + 1);
        bounds.push(0);
        for (i, s) in self.sentences.iter().enumerate() {
            if s.is_empty() || s.len() > config.max_seq_len {
                return Err(Error::InvalidArgument {
                    op: "forward",
                    detail: format!(
                        "sentence {i} has {} tokens, must be in 1..={}",
                        s.len(),
                        config.max_seq_len
                    ),
                });
            }
            for (pos, &t) in s.iter().enumerate() {
                if t as usize >= config.vocab_size {
                    return Err(Error::InvalidArgument {
                        op: "forward",
                        detail: format!("token id {t} >= vocab size {}", config.vocab_size),
                    });
                }
                tokens.push(t as usize);
                positions.push(pos);
            }
            bounds.push(tokens.len());
        }
        Ok((tokens, positions, bounds))
    }
}

/// Which flat rows feed the head.
#[derive(Debug, Clone)]
pub enum HeadRows {
    /// Position 0 of every sentence.
    Cls,
    /// Every position except 0 of every sentence (tagging, and
    /// classification by token voting).
    Content,
    /// Explicit flat row indices (masked-LM positions).
    Explicit(Vec<usize>),
}

pub struct GraphOutput {
    pub logits: ValueId,
    /// Post-block output of every layer, `[N, d]`, in layer order 1..=L.
    pub activations: Vec<ValueId>,
    /// `(param index, leaf id)` for every parameter, roster order.
    pub bindings: Vec<(usize, ValueId)>,
    /// Flat row index behind each logits row.
    pub head_rows: Vec<usize>,
    pub bounds: Vec<usize>,
}

/// Record the full forward graph for `batch` on `tape`.
pub fn build_graph(
    params: &ModelParams,
    tape: &mut Tape,
    batch: &Batch,
    head_rows: &HeadRows,
) -> Result<GraphOutput> {
    let config = &params.config;
    let (tokens, positions, bounds) = batch.flatten(config)?;

    // Register every parameter up front so leaf ids are roster-ordered.
    let mut bindings = Vec::with_capacity(params.params.len());
    let mut ids = Vec::with_capacity(params.params.len());
    for (idx, p) in params.params.iter().enumerate() {
        let id = tape.leaf(p.value.shape(), p.value.data())?;
        bindings.push((idx, id));
        ids.push(id);
    }
    let by_name = |name: &str| -> ValueId {
        let idx = params
            .params
            .iter()
            .position(|p| p.tag.name == name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        ids[idx]
    };

    let tok_emb = tape.embedding(by_name("embed.tok"), &tokens)?;
    let pos_emb = tape.embedding(by_name("embed.pos"), &positions)?;
    let mut x = tape.add(tok_emb, pos_emb)?;

    let mut activations = Vec::with_capacity(config.num_layers);
    for l in 1..=config.num_layers {
        let a = |n: &str| by_name(&format!("layer{l}.attn.{n}"));
        let f = |n: &str| by_name(&format!("layer{l}.ff.{n}"));

        let xn = tape.layer_norm(x, a("ln.g"), a("ln.b"), LN_EPS)?;
        let q = tape.matmul(xn, a("wq"))?;
        let q = tape.add_row(q, a("bq"))?;
        let k = tape.matmul(xn, a("wk"))?;
        let k = tape.add_row(k, a("bk"))?;
        let v = tape.matmul(xn, a("wv"))?;
        let v = tape.add_row(v, a("bv"))?;
        let ctx = tape.mhsa(q, k, v, &bounds, config.num_heads)?;
        let proj = tape.matmul(ctx, a("wo"))?;
        let proj = tape.add_row(proj, a("bo"))?;
        x = tape.add(x, proj)?;

        let hn = tape.layer_norm(x, f("ln.g"), f("ln.b"), LN_EPS)?;
        let h1 = tape.matmul(hn, f("w1"))?;
        let h1 = tape.add_row(h1, f("b1"))?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, f("w2"))?;
        let h2 = tape.add_row(h2, f("b2"))?;
        x = tape.add(x, h2)?;
        activations.push(x);
    }

    let rows: Vec<usize> = match head_rows {
        HeadRows::Cls => bounds[..bounds.len() - 1].to_vec(),
        HeadRows::Content => {
            let mut rows = Vec::new();
            for w in bounds.windows(2) {
                rows.extend(w[0] + 1..w[1]);
            }
            if rows.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "forward",
                    detail: "tagging needs at least one content token".into(),
                });
            }
            rows
        }
        HeadRows::Explicit(r) => {
            if r.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "forward",
                    detail: "explicit head rows must be non-empty".into(),
                });
            }
            r.clone()
        }
    };
    let selected = tape.select_rows(x, &rows)?;
    let hn = tape.layer_norm(selected, by_name("head.ln.g"), by_name("head.ln.b"), LN_EPS)?;
    let logits = tape.matmul(hn, by_name("head.w"))?;
    let logits = tape.add_row(logits, by_name("head.b"))?;

    Ok(GraphOutput { logits, activations, bindings, head_rows: rows, bounds })
}

/// Gradient-free forward pass; returns plain tensors.
pub struct EvalOutput {
    pub logits: Tensor,
    pub activations: Vec<Tensor>,
    pub head_rows: Vec<usize>,
    /// Flat-row sentence boundaries (`bounds[s]..bounds[s+1]` is sentence s).
    pub bounds: Vec<usize>,
}

pub fn forward(params: &ModelParams, batch: &Batch, head_rows: &HeadRows) -> Result<EvalOutput> {
    let mut tape = Tape::new();
    let g = build_graph(params, &mut tape, batch, head_rows)?;
    let to_tensor = |id: ValueId| {
        Tensor::new(tape.shape(id).to_vec(), tape.value(id).to_vec()).expect("tape shapes consistent")
    };
    Ok(EvalOutput {
        logits: to_tensor(g.logits),
        activations: g.activations.iter().map(|&a| to_tensor(a)).collect(),
        head_rows: g.head_rows,
        bounds: g.bounds,
    })
}

// ── masked-LM pretraining ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub mask_rate: f64,
    /// Of the selected positions, this fraction is overwritten with a
    /// random maskable token instead of [MASK] (BERT's 10%).
    pub mask_random_rate: f64,
    /// Of the selected positions, this fraction keeps its original token
    /// (BERT's 10%). Because these rows still bear loss, the trunk must
    /// keep every position's token identity recoverable at the top — which
    /// is what makes the representations usable by frozen-embedding
    /// fine-tuning later. The remainder becomes [MASK].
    pub mask_keep_rate: f64,
    /// Token written over masked positions.
    pub mask_token: u32,
    /// Only ids >= this are maskable (skips specials; anchors and content
    /// in the benchmark layout start at 4).
    pub maskable_min_id: u32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 100,
            adam: AdamConfig::default(),
            mask_rate: 0.15,
            mask_random_rate: 0.1,
            mask_keep_rate: 0.1,
            mask_token: 2,
            maskable_min_id: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Sample a masked batch: returns corrupted sentences, the flat row of
/// each selected position and the original ids at those rows. Selected
/// positions get the BERT-style treatment: most become [MASK], a
/// `mask_random_rate` fraction a random maskable token, a `mask_keep_rate`
/// fraction stay as they are (but still bear loss).
fn sample_masked_batch(
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, Vec<usize>, Vec<usize>)> {
    let mut sentences = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        sentences.push(corpus[rng.gen_range(0..corpus.len())].clone());
    }
    let mut rows = Vec::new();
    let mut originals = Vec::new();
    let mut maskable = Vec::new();
    let mut flat = 0usize;
    for s in &mut sentences {
        for t in s.iter_mut() {
            if *t >= cfg.maskable_min_id {
                maskable.push(flat);
                if rng.gen::<f64>() < cfg.mask_rate {
                    rows.push(flat);
                    originals.push(*t as usize);
                    let u: f64 = rng.gen();
                    if u < cfg.mask_random_rate {
                        *t = rng.gen_range(cfg.maskable_min_id..vocab_size as u32);
                    } else if u >= cfg.mask_random_rate + cfg.mask_keep_rate {
                        *t = cfg.mask_token;
                    }
                }
            }
            flat += 1;
        }
    }
    if rows.is_empty() {
        if maskable.is_empty() {
            return Err(Error::InvalidArgument {
                op: "pretrain_mlm",
                detail: "batch contains no maskable tokens".into(),
            });
        }
        // Force one mask so the loss always has at least one row.
        let flat_row = maskable[rng.gen_range(0..maskable.len())];
        let mut row = flat_row;
        for s in &mut sentences {
            if row < s.len() {
                rows.push(flat_row);
                originals.push(s[row] as usize);
                s[row] = cfg.mask_token;
                break;
            }
            row -= s.len();
        }
    }
    Ok((Batch::new(sentences), rows, originals))
}

/// Masked-language-model pretraining over a flat corpus of sentences.
/// `steps = 0` is a no-op. Requires a [`HeadKind::MaskedLm`] model. A
/// non-finite loss aborts with [`Error::Diverged`].
pub fn pretrain_mlm(
    params: &mut ModelParams,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if params.config.head != HeadKind::MaskedLm {
        return Err(Error::InvalidConfig("pretrain_mlm needs a masked-LM head".into()));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument { op: "pretrain_mlm", detail: "empty corpus".into() });
    }
    if !(0.0..=1.0).contains(&cfg.mask_rate) {
        return Err(Error::InvalidConfig(format!("mask_rate must be in [0,1], got {}", cfg.mask_rate)));
    }
    if !(cfg.mask_random_rate >= 0.0
        && cfg.mask_keep_rate >= 0.0
        && cfg.mask_random_rate + cfg.mask_keep_rate <= 1.0)
    {
        return Err(Error::InvalidConfig(format!(
            "mask_random_rate {} / mask_keep_rate {} must be >= 0 and sum to <= 1",
            cfg.mask_random_rate, cfg.mask_keep_rate
        )));
    }
    if (cfg.maskable_min_id as usize) >= params.config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "maskable_min_id {} is outside the vocabulary ({})",
            cfg.maskable_min_id, params.config.vocab_size
        )));
    }
    let mut report = PretrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    let sizes: Vec<usize> = params.params.iter().map(|p| p.value.numel()).collect();
    let mut opt = Optimizer::new(&sizes, cfg.base_lr, cfg.adam, cfg.warmup_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for step in 1..=cfg.steps {
        let (batch, rows, originals) =
            sample_masked_batch(corpus, cfg, params.config.vocab_size, &mut rng)?;
        let mut tape = Tape::new();
        let g = build_graph(params, &mut tape, &batch, &HeadRows::Explicit(rows))?;
        let loss_id = tape.cross_entropy(g.logits, &originals)?;
        let loss = tape.scalar(loss_id);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.losses.push(loss);

        let mut grads = tape.backward(loss_id)?;
        for (idx, leaf) in &g.bindings {
            let grad = grads.take(*leaf).unwrap_or_else(|| vec![0.0; params.params[*idx].value.numel()]);
            params.params[*idx].value.set_grad(grad)?;
        }
        let updates = params.params.iter_mut().map(|p| {
            let (data, grad) = p.value.data_and_grad_mut();
            ParamUpdate { label: &p.tag.name, data, grad: grad.expect("grad installed above"), k: 1.0 }
        });
        opt.step(updates)?;
        for p in params.params_mut() {
            p.value.clear_grad();
        }
    }
    Ok(report)
}

/// Accuracy of argmax predictions at masked positions, deterministic in
/// `seed`. Evaluates at most `max_sentences` sentences (0 = all). Pure
/// cloze: every evaluated position is overwritten with [MASK] regardless
/// of the training-time corruption mix.
pub fn mlm_masked_accuracy(
    params: &ModelParams,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
    max_sentences: usize,
) -> Result<f64> {
    if params.config.head != HeadKind::MaskedLm {
        return Err(Error::InvalidConfig("mlm_masked_accuracy needs a masked-LM head".into()));
    }
    let take = if max_sentences == 0 { corpus.len() } else { max_sentences.min(corpus.len()) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let vocab = params.config.vocab_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in corpus[..take].chunks(cfg.batch_size.max(1)) {
        let mut sentences: Vec<Vec<u32>> = chunk.to_vec();
        let mut rows = Vec::new();
        let mut originals = Vec::new();
        let mut flat = 0usize;
        for s in &mut sentences {
            for t in s.iter_mut() {
                if *t >= cfg.maskable_min_id && rng.gen::<f64>() < cfg.mask_rate {
                    rows.push(flat);
                    originals.push(*t as usize);
                    *t = cfg.mask_token;
                }
                flat += 1;
            }
        }
        if rows.is_empty() {
            continue;
        }
        let out = forward(params, &Batch::new(sentences), &HeadRows::Explicit(rows))?;
        for (r, &orig) in originals.iter().enumerate() {
            let row = &out.logits.data()[r * vocab..(r + 1) * vocab];
            let pred = argmax(row);
            if pred == orig {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument {
            op: "mlm_masked_accuracy",
            detail: "no positions were masked".into(),
        });
    }
    Ok(hits as f64 / total as f64)
}

/// Index of the maximum element; first index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
