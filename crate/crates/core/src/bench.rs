//! A desk-scale synthetic multilingual benchmark.
//!
//! "Languages" are bijective permutations of the content-token range of a
//! shared vocabulary: language 0 is the identity (the source language),
//! the others are seeded shuffles. Cross-lingual structure that a model
//! can actually learn comes from two places:
//!
//! - *anchors*: a small shared token range that is never permuted; every
//!   content token may be followed by the anchor of its concept group, so
//!   `perm(c)` and `c` have the same anchor distribution in every language;
//! - *cognates*: the first few concept groups are fixed points of every
//!   permutation (identical surface forms across languages).
//!
//! MLM pre-training on all languages can therefore align the languages;
//! source-only fine-tuning can destroy that alignment — which is exactly
//! the forgetting phenomenon the toolkit instruments.
//!
//! Sentences are generated by a tiny probabilistic grammar over *concept
//! groups*: content token ids are laid out as `content_start + 4*g + f`
//! where `g` is the concept group and `f ∈ {0,1,2,3}` the field — three
//! topic fields (the classification classes) and one neutral field. The
//! classification label is the majority topic field; the tagging label
//! marks maximal runs of field-0 tokens with B/I (O elsewhere). Both are
//! computable from the base sentence alone, so labels transfer verbatim
//! to every permuted rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{argmax, forward, Batch, HeadRows, ModelParams};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

/// Classification classes = topic fields 0..3 (field 3 is neutral).
pub const NUM_CLASSES: usize = 3;
/// Tagging alphabet: O = 0, B = 1, I = 2.
pub const NUM_TAGS: usize = 3;
pub const TAG_O: u32 = 0;
pub const TAG_B: u32 = 1;
pub const TAG_I: u32 = 2;

const FIELDS: usize = 4;
const NEUTRAL_FIELD: u32 = 3;

// ── grammar ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarSpec {
    pub vocab_size: usize,
    /// Shared (never permuted) anchor tokens after the specials.
    pub num_anchors: usize,
    /// Leading concept groups whose tokens are fixed points of every
    /// permutation.
    pub cognate_groups: usize,
    /// Content tokens per sentence (anchors and CLS come on top).
    pub min_content_len: usize,
    pub max_content_len: usize,
    /// Probability that a content token is followed by its group anchor.
    pub anchor_prob: f64,
    /// Probability that a classification sentence carries one off-topic
    /// distractor token.
    pub distractor_prob: f64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            vocab_size: 512,
            num_anchors: 32,
            cognate_groups: 4,
            min_content_len: 6,
            max_content_len: 12,
            anchor_prob: 0.5,
            distractor_prob: 0.25,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size as i64 - (NUM_SPECIALS + self.num_anchors) as i64;
        if self.num_anchors == 0 || content < (FIELDS * 8) as i64 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} with {} anchors leaves {content} content tokens; need at least {}",
                self.vocab_size,
                self.num_anchors,
                FIELDS * 8
            )));
        }
        if self.cognate_groups >= self.num_groups() {
            return Err(Error::InvalidConfig(format!(
                "{} cognate groups would fix all {} groups",
                self.cognate_groups,
                self.num_groups()
            )));
        }
        if self.min_content_len < 4 || self.max_content_len < self.min_content_len {
            return Err(Error::InvalidConfig(
                "content length range must satisfy 4 <= min <= max".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.anchor_prob) || !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn anchor_start(&self) -> u32 {
        NUM_SPECIALS as u32
    }

    pub fn content_start(&self) -> u32 {
        (NUM_SPECIALS + self.num_anchors) as u32
    }

    /// Concept groups; each contributes one token per field.
    pub fn num_groups(&self) -> usize {
        (self.vocab_size - NUM_SPECIALS - self.num_anchors) / FIELDS
    }

    pub fn token(&self, group: usize, field: u32) -> u32 {
        self.content_start() + (group * FIELDS) as u32 + field
    }

    pub fn is_content(&self, id: u32) -> bool {
        id >= self.content_start() && (id as usize) < self.vocab_size
    }

    pub fn field_of(&self, id: u32) -> Option<u32> {
        self.is_content(id).then(|| (id - self.content_start()) % FIELDS as u32)
    }

    pub fn group_of(&self, id: u32) -> Option<usize> {
        self.is_content(id).then(|| ((id - self.content_start()) / FIELDS as u32) as usize)
    }

    pub fn anchor_of(&self, id: u32) -> Option<u32> {
        self.group_of(id).map(|g| self.anchor_start() + (g % self.num_anchors) as u32)
    }

    /// Upper bound on generated sentence length (CLS + token/anchor pairs).
    pub fn max_sentence_len(&self) -> usize {
        1 + 2 * self.max_content_len
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies the grammar
    /// in dataset manifests.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("grammar serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

// ── languages ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub id: u32,
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl SyntheticLanguage {
    pub fn apply(&self, tokens: &[u32]) -> Vec<u32> {
        tokens.iter().map(|&t| self.forward[t as usize]).collect()
    }

    pub fn apply_inverse(&self, tokens: &[u32]) -> Vec<u32> {
        tokens.iter().map(|&t| self.inverse[t as usize]).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &t)| i as u32 == t)
    }
}

/// Language 0 is the identity; the rest permute the non-cognate content
/// tokens (specials, anchors and cognate groups are fixed everywhere).
pub fn make_languages(num_langs: usize, grammar: &GrammarSpec, seed: u64) -> Result<Vec<SyntheticLanguage>> {
    grammar.validate()?;
    if num_langs < 2 {
        return Err(Error::InvalidArgument {
            op: "make_languages",
            detail: format!("need at least 2 languages for a transfer gap, got {num_langs}"),
        });
    }
    let movable: Vec<u32> = (grammar.content_start()..grammar.vocab_size as u32)
        .filter(|&t| grammar.group_of(t).is_some_and(|g| g >= grammar.cognate_groups))
        .collect();
    if movable.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "make_languages",
            detail: "fewer than 2 permutable content tokens".into(),
        });
    }

    let mut langs = Vec::with_capacity(num_langs);
    for id in 0..num_langs as u32 {
        let mut forward: Vec<u32> = (0..grammar.vocab_size as u32).collect();
        if id != 0 {
            let mut shuffled = movable.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            shuffled.shuffle(&mut rng);
            for (&from, &to) in movable.iter().zip(&shuffled) {
                forward[from as usize] = to;
            }
        }
        let mut inverse = vec![0u32; forward.len()];
        for (from, &to) in forward.iter().enumerate() {
            inverse[to as usize] = from as u32;
        }
        langs.push(SyntheticLanguage { id, forward, inverse });
    }
    Ok(langs)
}

// ── sentences and labels ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(u32),
    /// One tag per token after the leading CLS.
    Tags(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseSentence {
    pub tokens: Vec<u32>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub label: Label,
    pub language_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Tagging,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Tagging => "tagging",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "tagging" => Ok(TaskKind::Tagging),
            other => Err(Error::InvalidArgument {
                op: "TaskKind::from_str",
                detail: format!("expected classification|tagging, got `{other}`"),
            }),
        }
    }
}

/// Majority topic field over the content tokens; the generator guarantees
/// a unique majority. Anchors and specials are ignored.
pub fn classification_label(grammar: &GrammarSpec, tokens: &[u32]) -> Result<u32> {
    let mut counts = [0usize; NUM_CLASSES];
    for &t in tokens {
        match grammar.field_of(t) {
            Some(f) if f != NEUTRAL_FIELD => counts[f as usize] += 1,
            _ => {}
        }
    }
    let best = (0..NUM_CLASSES).max_by_key(|&c| counts[c]).expect("nonempty class range");
    if counts[best] == 0 || counts.iter().filter(|&&c| c == counts[best]).count() > 1 {
        return Err(Error::InvalidArgument {
            op: "classification_label",
            detail: "sentence has no unique majority topic field".into(),
        });
    }
    Ok(best as u32)
}

/// B/I over maximal runs of field-0 content tokens, O elsewhere; one tag
/// per token after the leading CLS.
pub fn tagging_labels(grammar: &GrammarSpec, tokens: &[u32]) -> Vec<u32> {
    let mut tags = Vec::with_capacity(tokens.len().saturating_sub(1));
    let mut in_run = false;
    for &t in &tokens[1..] {
        let is_entity = grammar.field_of(t) == Some(0);
        tags.push(match (is_entity, in_run) {
            (true, false) => TAG_B,
            (true, true) => TAG_I,
            (false, _) => TAG_O,
        });
        in_run = is_entity;
    }
    tags
}

fn gen_classification(grammar: &GrammarSpec, rng: &mut ChaCha8Rng) -> BaseSentence {
    let y = rng.gen_range(0..NUM_CLASSES as u32);
    let n_content = rng.gen_range(grammar.min_content_len..=grammar.max_content_len);
    let groups = grammar.num_groups();

    // Three distinct on-topic concepts, maybe one distractor, neutral fill.
    let mut content: Vec<u32> = Vec::with_capacity(n_content);
    let mut topic_groups = BTreeSet::new();
    while topic_groups.len() < 3 {
        topic_groups.insert(rng.gen_range(0..groups));
    }
    content.extend(topic_groups.iter().map(|&g| grammar.token(g, y)));
    if rng.gen_bool(grammar.distractor_prob) {
        let other = (y + 1 + rng.gen_range(0..NUM_CLASSES as u32 - 1)) % NUM_CLASSES as u32;
        content.push(grammar.token(rng.gen_range(0..groups), other));
    }
    while content.len() < n_content {
        content.push(grammar.token(rng.gen_range(0..groups), NEUTRAL_FIELD));
    }
    content.shuffle(rng);

    let mut tokens = vec![CLS];
    for t in content {
        tokens.push(t);
        if rng.gen_bool(grammar.anchor_prob) {
            tokens.push(grammar.anchor_of(t).expect("content token has an anchor"));
        }
    }
    debug_assert_eq!(classification_label(grammar, &tokens).unwrap(), y);
    BaseSentence { tokens, label: Label::Class(y) }
}

fn gen_tagging(grammar: &GrammarSpec, rng: &mut ChaCha8Rng) -> BaseSentence {
    let n_content = rng.gen_range(grammar.min_content_len..=grammar.max_content_len);
    let groups = grammar.num_groups();
    let mut tokens = vec![CLS];
    let mut neutral_chunk = true;
    let mut produced = 0;
    while produced < n_content {
        let len = rng.gen_range(1..=3.min(n_content - produced));
        for _ in 0..len {
            let t = if neutral_chunk {
                grammar.token(rng.gen_range(0..groups), NEUTRAL_FIELD)
            } else {
                grammar.token(rng.gen_range(0..groups), 0)
            };
            tokens.push(t);
            // Anchors only after neutral tokens: an anchor inside an
            // entity run would split the span.
            if neutral_chunk && rng.gen_bool(grammar.anchor_prob) {
                tokens.push(grammar.anchor_of(t).expect("content token has an anchor"));
            }
            produced += 1;
        }
        neutral_chunk = !neutral_chunk;
    }
    let label = Label::Tags(tagging_labels(grammar, &tokens));
    BaseSentence { tokens, label }
}

/// Deterministic base-language corpus; labels are computed from the base
/// sentence at generation time.
pub fn generate_corpus(
    grammar: &GrammarSpec,
    kind: TaskKind,
    size: usize,
    seed: u64,
) -> Result<Vec<BaseSentence>> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|_| match kind {
            TaskKind::Classification => gen_classification(grammar, &mut rng),
            TaskKind::Tagging => gen_tagging(grammar, &mut rng),
        })
        .collect())
}

/// Render base sentences in one language (labels carry over verbatim).
pub fn to_language(base: &[BaseSentence], lang: &SyntheticLanguage) -> Vec<TaskInstance> {
    base.iter()
        .map(|s| TaskInstance {
            tokens: lang.apply(&s.tokens),
            label: s.label.clone(),
            language_id: lang.id,
        })
        .collect()
}

// ── splits and tasks ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub grammar: GrammarSpec,
    pub num_languages: usize,
    /// MLM sentences generated per language.
    pub pretrain_size: usize,
    /// Source-language labeled training examples.
    pub finetune_size: usize,
    /// Per-language validation examples (before the few-shot pool is
    /// carved out).
    pub val_size: usize,
    pub test_size: usize,
    /// Per-language few-shot pool extracted from validation.
    pub few_shot_pool: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grammar: GrammarSpec::default(),
            num_languages: 4,
            pretrain_size: 10_000,
            finetune_size: 4_000,
            val_size: 2_000,
            test_size: 2_000,
            few_shot_pool: 64,
            seed: 17,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.num_languages < 2 {
            return Err(Error::InvalidConfig("num_languages must be >= 2".into()));
        }
        if self.finetune_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig("split sizes must be positive".into()));
        }
        if self.few_shot_pool >= self.val_size {
            return Err(Error::InvalidConfig(format!(
                "few_shot_pool {} would consume the whole validation set {}",
                self.few_shot_pool, self.val_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    /// Source-language training set, plus M per non-source language when
    /// few-shot mixing is requested.
    pub train: Vec<TaskInstance>,
    pub validation: BTreeMap<u32, Vec<TaskInstance>>,
    pub test: BTreeMap<u32, Vec<TaskInstance>>,
    pub few_shot_pool: BTreeMap<u32, Vec<TaskInstance>>,
}

/// Assemble the labeled task: disjoint base-sentence slices for train /
/// validation / test, the few-shot pool carved out of validation, and M
/// pool examples per non-source language mixed into train.
pub fn make_task(
    config: &BenchConfig,
    languages: &[SyntheticLanguage],
    kind: TaskKind,
    m_few_shot: usize,
) -> Result<DataSplit> {
    config.validate()?;
    if languages.len() != config.num_languages || languages.is_empty() || languages[0].id != 0 {
        return Err(Error::InvalidArgument {
            op: "make_task",
            detail: "languages must come from make_languages with matching count".into(),
        });
    }
    if m_few_shot > config.few_shot_pool {
        return Err(Error::InvalidArgument {
            op: "make_task",
            detail: format!("M = {m_few_shot} exceeds the few-shot pool {}", config.few_shot_pool),
        });
    }

    let total = config.finetune_size + config.val_size + config.test_size;
    let task_seed = config.seed ^ 0x7461_736b ^ (kind as u64) << 32;
    let base = generate_corpus(&config.grammar, kind, total, task_seed)?;
    let (train_base, rest) = base.split_at(config.finetune_size);
    let (val_base, test_base) = rest.split_at(config.val_size);

    // The few-shot pool comes out of the original validation slice; what
    // remains is the working validation set.
    let mut idx: Vec<usize> = (0..val_base.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0x706f_6f6c);
    idx.shuffle(&mut rng);
    let pool_idx: BTreeSet<usize> = idx[..config.few_shot_pool].iter().copied().collect();
    let pool_base: Vec<BaseSentence> =
        pool_idx.iter().map(|&i| val_base[i].clone()).collect();
    let kept_base: Vec<BaseSentence> = (0..val_base.len())
        .filter(|i| !pool_idx.contains(i))
        .map(|i| val_base[i].clone())
        .collect();

    let mut split = DataSplit {
        train: to_language(train_base, &languages[0]),
        validation: BTreeMap::new(),
        test: BTreeMap::new(),
        few_shot_pool: BTreeMap::new(),
    };
    for lang in languages {
        split.validation.insert(lang.id, to_language(&kept_base, lang));
        split.test.insert(lang.id, to_language(test_base, lang));
        split.few_shot_pool.insert(lang.id, to_language(&pool_base, lang));
    }

    if m_few_shot > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0x6673_686f_74);
        for lang in &languages[1..] {
            let pool = &split.few_shot_pool[&lang.id];
            let mut pick: Vec<usize> = (0..pool.len()).collect();
            pick.shuffle(&mut rng);
            for &i in &pick[..m_few_shot] {
                split.train.push(pool[i].clone());
            }
        }
    }
    Ok(split)
}

/// The mixed multilingual MLM corpus: `pretrain_size` base sentences per
/// language (fresh draws each), rendered in that language, interleaved.
pub fn pretrain_corpus(config: &BenchConfig, languages: &[SyntheticLanguage]) -> Result<Vec<Vec<u32>>> {
    config.validate()?;
    let mut per_lang = Vec::with_capacity(languages.len());
    for lang in languages {
        let base = generate_corpus(
            &config.grammar,
            TaskKind::Classification,
            config.pretrain_size,
            config.seed ^ 0x6d6c_6d ^ ((lang.id as u64) << 40),
        )?;
        per_lang.push(base.iter().map(|s| lang.apply(&s.tokens)).collect::<Vec<_>>());
    }
    let mut mixed = Vec::with_capacity(languages.len() * config.pretrain_size);
    for i in 0..config.pretrain_size {
        for lang_sents in &per_lang {
            mixed.push(lang_sents[i].clone());
        }
    }
    Ok(mixed)
}

// ── metrics ─────────────────────────────────────────────────────────────

/// Percent of exact matches.
pub fn accuracy(pred: &[u32], gold: &[u32]) -> Result<f64> {
    if pred.len() != gold.len() || gold.is_empty() {
        return Err(Error::InvalidArgument {
            op: "accuracy",
            detail: format!("need matching nonempty slices, got {} vs {}", pred.len(), gold.len()),
        });
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Spans as (sentence, start, end-exclusive): a span opens at B — or at a
/// stray I, leniently — and extends over following I tags.
fn extract_spans(tags: &[Vec<u32>]) -> BTreeSet<(usize, usize, usize)> {
    let mut spans = BTreeSet::new();
    for (s, seq) in tags.iter().enumerate() {
        let mut start: Option<usize> = None;
        for (i, &t) in seq.iter().enumerate() {
            match t {
                TAG_B => {
                    if let Some(st) = start.take() {
                        spans.insert((s, st, i));
                    }
                    start = Some(i);
                }
                TAG_I => {
                    if start.is_none() {
                        start = Some(i);
                    }
                }
                _ => {
                    if let Some(st) = start.take() {
                        spans.insert((s, st, i));
                    }
                }
            }
        }
        if let Some(st) = start {
            spans.insert((s, st, seq.len()));
        }
    }
    spans
}

/// Span-level F1 (exact-match spans), in percent. Both sides empty is a
/// perfect 100; predicting nothing against nonempty gold is 0.
pub fn span_f1(pred: &[Vec<u32>], gold: &[Vec<u32>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument {
            op: "span_f1",
            detail: format!("sentence counts differ: {} vs {}", pred.len(), gold.len()),
        });
    }
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument {
                op: "span_f1",
                detail: format!("tag sequence lengths differ: {} vs {}", p.len(), g.len()),
            });
        }
    }
    let p_spans = extract_spans(pred);
    let g_spans = extract_spans(gold);
    if p_spans.is_empty() && g_spans.is_empty() {
        return Ok(100.0);
    }
    let tp = p_spans.intersection(&g_spans).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / p_spans.len() as f64;
    let recall = tp / g_spans.len() as f64;
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Run the model over one language's instances and score them.
pub fn evaluate_language(
    params: &ModelParams,
    instances: &[TaskInstance],
    kind: TaskKind,
    batch_size: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate_language",
            detail: "empty evaluation set".into(),
        });
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument { op: "evaluate_language", detail: "batch_size 0".into() });
    }
    match kind {
        TaskKind::Classification => {
            // Token voting, mirroring training: the sentence prediction is
            // the argmax of the row logits summed over all non-CLS rows.
            let mut pred = Vec::with_capacity(instances.len());
            let mut gold = Vec::with_capacity(instances.len());
            for chunk in instances.chunks(batch_size) {
                let batch = Batch { sentences: chunk.iter().map(|i| i.tokens.clone()).collect() };
                let out = forward(params, &batch, &HeadRows::Content)?;
                let classes = out.logits.shape()[1];
                let mut row = 0;
                for inst in chunk {
                    let mut votes = vec![0.0; classes];
                    for _ in 0..inst.tokens.len() - 1 {
                        let logits = &out.logits.data()[row * classes..(row + 1) * classes];
                        for (v, l) in votes.iter_mut().zip(logits) {
                            *v += l;
                        }
                        row += 1;
                    }
                    pred.push(argmax(&votes) as u32);
                    match &inst.label {
                        Label::Class(c) => gold.push(*c),
                        Label::Tags(_) => {
                            return Err(Error::InvalidArgument {
                                op: "evaluate_language",
                                detail: "tagging instance in a classification eval".into(),
                            })
                        }
                    }
                }
            }
            accuracy(&pred, &gold)
        }
        TaskKind::Tagging => {
            let mut pred = Vec::with_capacity(instances.len());
            let mut gold = Vec::with_capacity(instances.len());
            for chunk in instances.chunks(batch_size) {
                let batch = Batch { sentences: chunk.iter().map(|i| i.tokens.clone()).collect() };
                let out = forward(params, &batch, &HeadRows::Content)?;
                let tags = out.logits.shape()[1];
                let mut row = 0;
                for inst in chunk {
                    let body = inst.tokens.len() - 1;
                    let mut seq = Vec::with_capacity(body);
                    for _ in 0..body {
                        let logits = &out.logits.data()[row * tags..(row + 1) * tags];
                        seq.push(argmax(logits) as u32);
                        row += 1;
                    }
                    pred.push(seq);
                    match &inst.label {
                        Label::Tags(t) => gold.push(t.clone()),
                        Label::Class(_) => {
                            return Err(Error::InvalidArgument {
                                op: "evaluate_language",
                                detail: "classification instance in a tagging eval".into(),
                            })
                        }
                    }
                }
            }
            span_f1(&pred, &gold)
        }
    }
}

/// Per-language metric over a map of evaluation sets.
pub fn evaluate(
    params: &ModelParams,
    sets: &BTreeMap<u32, Vec<TaskInstance>>,
    kind: TaskKind,
    batch_size: usize,
) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for (&lang, instances) in sets {
        out.insert(lang, evaluate_language(params, instances, kind, batch_size)?);
    }
    Ok(out)
}

// ── dataset files ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub grammar_hash: String,
    pub split_sizes: BTreeMap<String, usize>,
}

fn format_label(label: &Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Tags(t) => t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
    }
}

/// One record per line: `language_id<TAB>token ids<TAB>label(s)`.
pub fn write_dataset(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let toks = inst.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(f, "{}\t{}\t{}", inst.language_id, toks, format_label(&inst.label))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, kind: TaskKind) -> Result<Vec<TaskInstance>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (lang, toks, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Format(format!("line {}: expected 3 tab-separated fields", lineno + 1)))
            }
        };
        let parse_ids = |s: &str| -> Result<Vec<u32>> {
            s.split_whitespace()
                .map(|x| x.parse::<u32>().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1))))
                .collect()
        };
        let tokens = parse_ids(toks)?;
        if tokens.is_empty() {
            return Err(Error::Format(format!("line {}: empty token list", lineno + 1)));
        }
        let label = match kind {
            TaskKind::Classification => Label::Class(
                label.parse().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?,
            ),
            TaskKind::Tagging => {
                let tags = parse_ids(label)?;
                if tags.len() != tokens.len() - 1 {
                    return Err(Error::Format(format!(
                        "line {}: {} tags for {} body tokens",
                        lineno + 1,
                        tags.len(),
                        tokens.len() - 1
                    )));
                }
                Label::Tags(tags)
            }
        };
        out.push(TaskInstance {
            tokens,
            label,
            language_id: lang.parse().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
