//! The fine-tuning loop: model, optimizer and scheduler wired together
//! with a fixed per-step ordering (Eq. 1 with the multiplier of Eq. 2):
//!
//! 1. sample a batch and compute the task loss;
//! 2. push the loss into the scheduler's window — K for step t uses
//!    losses through step t;
//! 3. backpropagate;
//! 4. update every parameter with effective step `K(tag) * base_step`.
//!
//! CKA gating and evaluation cadences live above this loop (the runner
//! pauses training at measurement points and feeds the gate verdict back
//! via [`Scheduler::set_cka_gate`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{Label, TaskInstance, TaskKind};
use crate::model::{build_graph, Batch, HeadKind, HeadRows, ModelParams};
use crate::optim::{AdamConfig, Optimizer, ParamUpdate};
use crate::schedule::Scheduler;
use crate::tape::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            steps: 400,
            batch_size: 16,
            base_lr: 5e-4,
            warmup_steps: 0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

pub struct FineTuner {
    params: ModelParams,
    optimizer: Optimizer,
    scheduler: Scheduler,
    kind: TaskKind,
    train: Vec<TaskInstance>,
    batch_size: usize,
    rng: ChaCha8Rng,
    steps_taken: u64,
    losses: Vec<f64>,
    last_batch: Option<Batch>,
}

impl FineTuner {
    pub fn new(
        params: ModelParams,
        scheduler: Scheduler,
        kind: TaskKind,
        train: Vec<TaskInstance>,
        cfg: &FineTuneConfig,
    ) -> Result<Self> {
        match (kind, &params.config().head) {
            (TaskKind::Classification, HeadKind::Classification { .. }) => {}
            (TaskKind::Tagging, HeadKind::Tagging { .. }) => {}
            (k, h) => {
                return Err(Error::InvalidConfig(format!(
                    "task {k} cannot train against head {h:?}"
                )))
            }
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument {
                op: "FineTuner::new",
                detail: "empty training set".into(),
            });
        }
        if cfg.batch_size == 0 || !(cfg.base_lr > 0.0 && cfg.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} / base_lr {} out of range",
                cfg.batch_size, cfg.base_lr
            )));
        }
        for inst in &train {
            match (&inst.label, kind) {
                (Label::Class(_), TaskKind::Classification) => {}
                (Label::Tags(t), TaskKind::Tagging) if t.len() + 1 == inst.tokens.len() => {}
                _ => {
                    return Err(Error::InvalidArgument {
                        op: "FineTuner::new",
                        detail: "training instance label does not fit the task".into(),
                    })
                }
            }
        }
        let sizes: Vec<usize> = params.params().iter().map(|p| p.value.numel()).collect();
        let optimizer = Optimizer::new(&sizes, cfg.base_lr, cfg.adam, cfg.warmup_steps)?;
        Ok(FineTuner {
            params,
            optimizer,
            scheduler,
            kind,
            train,
            batch_size: cfg.batch_size,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x66_7475_6e65),
            steps_taken: 0,
            losses: Vec::new(),
            last_batch: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn scheduler_mut(&mut self) -> &mut Scheduler {
        &mut self.scheduler
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// The most recent training batch (the representation-similarity probe
    /// measures on the current data batch).
    pub fn last_batch(&self) -> Option<&Batch> {
        self.last_batch.as_ref()
    }

    /// Uniform with-replacement sample; the head targets follow the flat
    /// row order the graph produces for this task's head-row rule.
    fn sample_batch(&mut self) -> (Batch, Vec<usize>) {
        let mut sentences = Vec::with_capacity(self.batch_size);
        let mut targets = Vec::new();
        for _ in 0..self.batch_size {
            let inst = &self.train[self.rng.gen_range(0..self.train.len())];
            sentences.push(inst.tokens.clone());
            match &inst.label {
                // Classification trains by token voting: every non-CLS row
                // predicts the sentence class (evaluation sums the row
                // logits). This keeps the task decodable from the
                // masked-LM representations themselves, so partial
                // fine-tuning (frozen body, frozen embeddings) is a
                // meaningful condition rather than a dead end.
                Label::Class(c) => {
                    targets.extend(std::iter::repeat(*c as usize).take(inst.tokens.len() - 1))
                }
                Label::Tags(tags) => targets.extend(tags.iter().map(|&t| t as usize)),
            }
        }
        (Batch { sentences }, targets)
    }

    /// One scheduled step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let (batch, targets) = self.sample_batch();
        let head_rows = match self.kind {
            TaskKind::Classification | TaskKind::Tagging => HeadRows::Content,
        };
        let mut tape = Tape::new();
        let g = build_graph(&self.params, &mut tape, &batch, &head_rows)?;
        let loss_id = tape.cross_entropy(g.logits, &targets)?;
        let loss = tape.scalar(loss_id);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.steps_taken + 1 });
        }

        // Loss first, then K: the window the multipliers see includes
        // this step's loss.
        self.scheduler.observe_loss(loss)?;

        let mut grads = tape.backward(loss_id)?;
        let multipliers: Vec<f64> = self
            .params
            .params()
            .iter()
            .map(|p| self.scheduler.multiplier(&p.tag))
            .collect::<Result<_>>()?;
        // Bindings are one per parameter in roster order, so the three
        // sequences below stay aligned by construction.
        let grad_buffers: Vec<Vec<f64>> = g
            .bindings
            .iter()
            .map(|&(idx, leaf)| {
                grads.take(leaf).unwrap_or_else(|| vec![0.0; self.params.params()[idx].value.numel()])
            })
            .collect();
        let updates = self
            .params
            .params_mut()
            .iter_mut()
            .zip(&grad_buffers)
            .zip(&multipliers)
            .map(|((p, grad), &k)| ParamUpdate {
                label: &p.tag.name,
                data: p.value.data_mut(),
                grad,
                k,
            });
        self.optimizer.step(updates)?;
        self.steps_taken += 1;
        self.losses.push(loss);
        self.last_batch = Some(batch);
        Ok(loss)
    }

    /// Run `n` steps (stops early only on error).
    pub fn run(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_corpus, make_languages, to_language, GrammarSpec, NUM_CLASSES, NUM_TAGS};
    use crate::model::{build_model, with_head, ModelConfig};
    use crate::probe::{apply_freeze, InterventionKind, InterventionPlan};
    use crate::schedule::{assign_weight_sets, Policy4Mode, PolicyConfig, Scheduler};
    use std::collections::BTreeSet;

    fn grammar() -> GrammarSpec {
        GrammarSpec { vocab_size: 128, num_anchors: 8, ..GrammarSpec::default() }
    }

    fn model_config(head: HeadKind) -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            vocab_size: 128,
            max_seq_len: 32,
            head,
        }
    }

    fn train_set(kind: TaskKind, n: usize) -> Vec<TaskInstance> {
        let g = grammar();
        let langs = make_languages(2, &g, 3).unwrap();
        let base = generate_corpus(&g, kind, n, 41).unwrap();
        to_language(&base, &langs[0])
    }

    fn neutral_policy(window: usize) -> PolicyConfig {
        PolicyConfig {
            c1: 1.0,
            c2: 1.0,
            tau: f64::INFINITY,
            window_size: window,
            policy4_mode: Policy4Mode::Off,
            ..PolicyConfig::default()
        }
    }

    fn scheduler_for(params: &ModelParams, cfg: PolicyConfig, slow: bool, fast: bool) -> Scheduler {
        let a = assign_weight_sets(params.config().num_layers, &params.tags(), cfg.embedding_in_s1)
            .unwrap();
        Scheduler::new(cfg, a, slow, fast).unwrap()
    }

    fn classifier(seed: u64) -> ModelParams {
        let body = build_model(&model_config(HeadKind::MaskedLm), seed).unwrap();
        with_head(&body, HeadKind::Classification { num_classes: NUM_CLASSES }, seed ^ 1).unwrap()
    }

    #[test]
    fn construction_validates_task_and_data() {
        let params = classifier(7);
        let cfg = FineTuneConfig::default();
        let sched = scheduler_for(&params, neutral_policy(10), false, false);
        // Wrong task for the head.
        assert!(FineTuner::new(
            params.clone(),
            sched.clone(),
            TaskKind::Tagging,
            train_set(TaskKind::Tagging, 10),
            &cfg
        )
        .is_err());
        // Label kind must match the task.
        assert!(FineTuner::new(
            params.clone(),
            sched.clone(),
            TaskKind::Classification,
            train_set(TaskKind::Tagging, 10),
            &cfg
        )
        .is_err());
        assert!(FineTuner::new(params.clone(), sched.clone(), TaskKind::Classification, vec![], &cfg)
            .is_err());
        assert!(FineTuner::new(
            params,
            sched,
            TaskKind::Classification,
            train_set(TaskKind::Classification, 10),
            &cfg
        )
        .is_ok());
    }

    #[test]
    fn losses_fall_on_both_tasks() {
        for (kind, head) in [
            (TaskKind::Classification, HeadKind::Classification { num_classes: NUM_CLASSES }),
            (TaskKind::Tagging, HeadKind::Tagging { num_tags: NUM_TAGS }),
        ] {
            let body = build_model(&model_config(HeadKind::MaskedLm), 7).unwrap();
            let params = with_head(&body, head, 8).unwrap();
            let sched = scheduler_for(&params, neutral_policy(10), false, false);
            let cfg = FineTuneConfig { steps: 120, base_lr: 2e-3, seed: 5, ..FineTuneConfig::default() };
            let mut tuner = FineTuner::new(params, sched, kind, train_set(kind, 64), &cfg).unwrap();
            tuner.run(cfg.steps).unwrap();
            let first10: f64 = tuner.losses()[..10].iter().sum::<f64>() / 10.0;
            let last10: f64 = tuner.losses()[110..].iter().sum::<f64>() / 10.0;
            assert!(
                last10 < 0.7 * first10,
                "{kind}: loss did not fall ({first10:.3} -> {last10:.3})"
            );
            assert_eq!(tuner.steps_taken(), 120);
        }
    }

    #[test]
    fn neutral_scheduler_matches_plain_baseline_bitwise() {
        let params = classifier(3);
        let train = train_set(TaskKind::Classification, 48);
        let cfg = FineTuneConfig { seed: 9, ..FineTuneConfig::default() };

        // Plain baseline: policies disabled outright.
        let base_sched = scheduler_for(&params, neutral_policy(5), false, false);
        let mut base =
            FineTuner::new(params.clone(), base_sched, TaskKind::Classification, train.clone(), &cfg)
                .unwrap();
        base.run(60).unwrap();

        // Neutral configuration: policies on, all constants at 1, detector
        // disabled. Must degenerate to the same trajectory bit-for-bit.
        let neutral_sched = scheduler_for(&params, neutral_policy(5), true, true);
        let mut neutral =
            FineTuner::new(params, neutral_sched, TaskKind::Classification, train, &cfg).unwrap();
        neutral.run(60).unwrap();

        assert_eq!(base.losses(), neutral.losses());
        for (a, b) in base.params().params().iter().zip(neutral.params().params()) {
            assert_eq!(a.value.data(), b.value.data(), "{} diverged", a.tag.name);
        }
    }

    #[test]
    fn c1_zero_freezes_s1_throughout_p1() {
        let params = classifier(5);
        // tau = ∞ keeps the run in P1, c1 = 0 freezes S1 there.
        let policy = PolicyConfig { c1: 0.0, tau: f64::INFINITY, window_size: 5, ..PolicyConfig::default() };
        let sched = scheduler_for(&params, policy, true, false);
        let assignment = sched.assignment().clone();
        let cfg = FineTuneConfig { seed: 2, ..FineTuneConfig::default() };
        let before = params.clone();
        let mut tuner =
            FineTuner::new(params, sched, TaskKind::Classification, train_set(TaskKind::Classification, 32), &cfg)
                .unwrap();
        tuner.run(40).unwrap();
        let mut moved = 0;
        for (now, was) in tuner.params().params().iter().zip(before.params()) {
            if assignment.s1.contains(&now.tag) {
                assert_eq!(now.value.data(), was.value.data(), "{} moved in P1", now.tag.name);
            } else if now.value.data() != was.value.data() {
                moved += 1;
            }
        }
        assert!(moved > 0, "unfrozen parameters should train");
    }

    #[test]
    fn frozen_tags_stay_bit_identical_while_rest_train() {
        let params = classifier(6);
        let sched = scheduler_for(&params, neutral_policy(5), false, false);
        let target: BTreeSet<_> = params
            .tags()
            .into_iter()
            .filter(|t| t.name.starts_with("layer2.attn.") || t.name.starts_with("layer1.ff."))
            .collect();
        let plan = InterventionPlan::new(InterventionKind::Freeze, target.clone()).unwrap();
        let cfg = FineTuneConfig { seed: 4, ..FineTuneConfig::default() };
        let before = params.clone();
        let mut tuner = FineTuner::new(
            params,
            sched,
            TaskKind::Classification,
            train_set(TaskKind::Classification, 32),
            &cfg,
        )
        .unwrap();
        apply_freeze(&plan, &before, tuner.scheduler_mut()).unwrap();
        tuner.run(50).unwrap();
        for (now, was) in tuner.params().params().iter().zip(before.params()) {
            if target.contains(&now.tag) {
                assert_eq!(now.value.data(), was.value.data(), "{} should be frozen", now.tag.name);
            } else {
                assert_ne!(now.value.data(), was.value.data(), "{} should train", now.tag.name);
            }
        }
    }

    #[test]
    fn k_half_under_sgd_equals_halved_lr_for_that_group() {
        // One step, SGD mode: S1 updated with c1 = 0.5 at lr L must equal
        // S1 updated with K = 1 at lr L/2, bitwise.
        let params = classifier(8);
        let train = train_set(TaskKind::Classification, 16);
        let sgd = AdamConfig::sgd();
        let policy = PolicyConfig { c1: 0.5, tau: f64::INFINITY, window_size: 5, ..PolicyConfig::default() };

        let cfg_full = FineTuneConfig { base_lr: 1e-2, adam: sgd, seed: 3, ..FineTuneConfig::default() };
        let sched = scheduler_for(&params, policy, true, false);
        let assignment = sched.assignment().clone();
        let mut a =
            FineTuner::new(params.clone(), sched, TaskKind::Classification, train.clone(), &cfg_full)
                .unwrap();
        a.step().unwrap();

        let cfg_half = FineTuneConfig { base_lr: 5e-3, ..cfg_full };
        let sched_half = scheduler_for(&params, neutral_policy(5), false, false);
        let mut b =
            FineTuner::new(params, sched_half, TaskKind::Classification, train, &cfg_half).unwrap();
        b.step().unwrap();

        for (pa, pb) in a.params().params().iter().zip(b.params().params()) {
            if assignment.s1.contains(&pa.tag) {
                assert_eq!(pa.value.data(), pb.value.data(), "{} differs", pa.tag.name);
            }
        }
    }

    #[test]
    fn trainer_runs_are_seed_deterministic() {
        let params = classifier(10);
        let train = train_set(TaskKind::Classification, 32);
        let cfg = FineTuneConfig { seed: 12, ..FineTuneConfig::default() };
        let run = |p: &ModelParams| {
            let sched = scheduler_for(p, PolicyConfig { window_size: 5, ..PolicyConfig::default() }, true, true);
            let mut t =
                FineTuner::new(p.clone(), sched, TaskKind::Classification, train.clone(), &cfg).unwrap();
            t.run(30).unwrap();
            (t.losses().to_vec(), t.into_params())
        };
        let (la, pa) = run(&params);
        let (lb, pb) = run(&params);
        assert_eq!(la, lb);
        for (x, y) in pa.params().iter().zip(pb.params()) {
            assert_eq!(x.value.data(), y.value.data());
        }
    }

    #[test]
    fn divergent_loss_is_reported_with_step() {
        // A huge learning rate in SGD mode blows the loss up quickly.
        let params = classifier(1);
        let sched = scheduler_for(&params, neutral_policy(5), false, false);
        let cfg = FineTuneConfig {
            base_lr: 1e6,
            adam: AdamConfig::sgd(),
            seed: 1,
            ..FineTuneConfig::default()
        };
        let mut tuner = FineTuner::new(
            params,
            sched,
            TaskKind::Classification,
            train_set(TaskKind::Classification, 16),
            &cfg,
        )
        .unwrap();
        let err = tuner.run(200).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }
}
