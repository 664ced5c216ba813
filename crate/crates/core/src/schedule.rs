//! Phase detection and the four phase- and layer-dependent learning-rate
//! policies, expressed as per-tag multipliers K.
//!
//! The update rule is `theta -= K * base_step`, with K decided by where a
//! tensor sits (weight sets over layers) and when the step happens (phase
//! of the loss curve):
//!
//! - Policy I: during the initial steep-drop phase P1, the bottom-layer
//!   set S1 trains at `c1 << 1` (protect pre-trained knowledge while the
//!   fresh head thrashes).
//! - Policy II: after the transition to P2, the feed-forward weights of
//!   the lowest layers (S2, a subset of S1) get the adaptive multiplier
//!   `R(phi) = max(1 - phi^r, 0)` where `phi` is the ratio of the recent
//!   to the prior loss-window sum: the flatter the loss, the closer these
//!   weights are to frozen.
//! - Policy III: the top layers V1 always train at full speed in P1.
//! - Policy IV: in P2 the attention weights of the top layers (V2) train
//!   at `c2 >> 1`, optionally gated on the last-two-layer CKA series still
//!   dropping (see `probe::cka_slope_gate`).
//!
//! P1 membership is `(prior_sum - recent_sum)/window_size > tau`: the run
//! is in P1 while the per-window loss drop is steep. The first time the
//! test fails (once two full windows exist) the state latches into P2 for
//! the rest of the run. A non-finite `tau` disables the detector entirely
//! (the run stays in P1), which is what makes the neutral configuration
//! (`c1 = c2 = 1`, policy IV off, `tau = inf`) degenerate to plain
//! fine-tuning bit-for-bit.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamTag, Sublayer};
use crate::{Error, Result};

// ── loss window ─────────────────────────────────────────────────────────

/// Ring buffer of the last `2 * window_size` per-step losses: the recent
/// window and the prior window, in the sense of Eq. 3's phi ratio.
#[derive(Debug, Clone)]
pub struct LossWindow {
    window_size: usize,
    buf: VecDeque<f64>,
    observed: u64,
}

impl LossWindow {
    pub fn new(window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be >= 1".into()));
        }
        Ok(LossWindow { window_size, buf: VecDeque::with_capacity(2 * window_size), observed: 0 })
    }

    /// Push one loss; evicts the oldest once `2 * window_size` are held.
    pub fn observe(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "observed loss".into() });
        }
        if self.buf.len() == 2 * self.window_size {
            self.buf.pop_front();
        }
        self.buf.push_back(loss);
        self.observed += 1;
        Ok(())
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    /// True once two full windows of history exist.
    pub fn is_full(&self) -> bool {
        self.buf.len() == 2 * self.window_size
    }

    /// Sum over the most recent `window_size` losses (None until full).
    pub fn recent_sum(&self) -> Option<f64> {
        self.is_full().then(|| self.buf.iter().skip(self.window_size).sum())
    }

    /// Sum over the `window_size` losses before the recent ones.
    pub fn prior_sum(&self) -> Option<f64> {
        self.is_full().then(|| self.buf.iter().take(self.window_size).sum())
    }
}

/// `phi = recent_sum / prior_sum`. Needs a full window pair; the prior sum
/// must be positive (losses are nonnegative, so a zero prior sum means the
/// run is degenerate).
pub fn phi(window: &LossWindow) -> Result<f64> {
    let (recent, prior) = match (window.recent_sum(), window.prior_sum()) {
        (Some(r), Some(p)) => (r, p),
        _ => {
            return Err(Error::InsufficientHistory(format!(
                "phi needs {} losses, have {}",
                2 * window.window_size,
                window.buf.len()
            )))
        }
    };
    if prior <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "phi",
            detail: format!("prior window sum must be positive, got {prior}"),
        });
    }
    Ok(recent / prior)
}

/// Eq. 3: `R(phi) = max(1 - phi^r_exp, 0)`.
pub fn r_multiplier(phi: f64, r_exp: u32) -> f64 {
    (1.0 - phi.powi(r_exp as i32)).max(0.0)
}

// ── phase detection ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::P1 => "P1",
            Phase::P2 => "P2",
        })
    }
}

/// The raw P1 membership test: per-window average drop still above `tau`.
/// `None` while history is insufficient.
pub fn p1_criterion(window: &LossWindow, tau: f64) -> Option<bool> {
    let recent = window.recent_sum()?;
    let prior = window.prior_sum()?;
    Some((prior - recent) / window.window_size as f64 > tau)
}

/// One-way phase state. Starts in P1; the first failing criterion (with
/// full history) latches P2 permanently. A non-finite `tau` disables the
/// detector: the run reports P1 forever.
#[derive(Debug, Clone)]
pub struct PhaseState {
    tau: f64,
    latched: bool,
}

impl PhaseState {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_nan() || (tau.is_finite() && tau <= 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive (or +inf), got {tau}")));
        }
        Ok(PhaseState { tau, latched: false })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Re-evaluate after a new loss observation.
    pub fn update(&mut self, window: &LossWindow) -> Phase {
        if self.latched {
            return Phase::P2;
        }
        if !self.tau.is_finite() {
            return Phase::P1;
        }
        match p1_criterion(window, self.tau) {
            None | Some(true) => Phase::P1,
            Some(false) => {
                self.latched = true;
                Phase::P2
            }
        }
    }

    pub fn phase(&self) -> Phase {
        if self.latched {
            Phase::P2
        } else {
            Phase::P1
        }
    }
}

// ── policy configuration ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy4Mode {
    Off,
    Always,
    CkaGated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Policy I multiplier for S1 during P1 (< 1; 1 = neutral).
    pub c1: f64,
    /// Policy IV multiplier for V2 during P2 (> 1; 1 = neutral).
    pub c2: f64,
    /// Exponent of Eq. 3.
    pub r_exp: u32,
    /// P1 threshold in loss units per step; +inf disables the detector.
    pub tau: f64,
    pub window_size: usize,
    pub policy4_mode: Policy4Mode,
    /// Treat the embedding tables as part of S1 (off by default: the
    /// weight sets are defined over transformer layers only).
    pub embedding_in_s1: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            c1: 0.01,
            c2: 10.0,
            r_exp: 3,
            tau: 0.1,
            window_size: 20,
            policy4_mode: Policy4Mode::CkaGated,
            embedding_in_s1: false,
        }
    }
}

impl PolicyConfig {
    /// Nominal bounds are `0 <= c1 < 1 < c2`; both are accepted at 1, the
    /// neutral value that switches the respective policy off.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c1) {
            return Err(Error::InvalidConfig(format!("c1 must be in [0, 1], got {}", self.c1)));
        }
        if !(self.c2 >= 1.0 && self.c2.is_finite()) {
            return Err(Error::InvalidConfig(format!("c2 must be >= 1, got {}", self.c2)));
        }
        if self.r_exp < 1 {
            return Err(Error::InvalidConfig("r_exp must be >= 1".into()));
        }
        if self.tau.is_nan() || (self.tau.is_finite() && self.tau <= 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive (or +inf), got {}", self.tau)));
        }
        if self.window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be >= 1".into()));
        }
        Ok(())
    }
}

// ── weight sets ─────────────────────────────────────────────────────────

/// The four tag sets of the policies. Invariants: `s2 ⊆ s1`, `v2 ⊆ v1`,
/// `s1 ∩ v1 = ∅`.
#[derive(Debug, Clone)]
pub struct WeightSetAssignment {
    pub s1: BTreeSet<ParamTag>,
    pub s2: BTreeSet<ParamTag>,
    pub v1: BTreeSet<ParamTag>,
    pub v2: BTreeSet<ParamTag>,
}

impl WeightSetAssignment {
    pub fn validate(&self) -> Result<()> {
        if !self.s2.is_subset(&self.s1) || !self.v2.is_subset(&self.v1) {
            return Err(Error::InvalidConfig("weight sets must satisfy s2 ⊆ s1 and v2 ⊆ v1".into()));
        }
        if self.s1.intersection(&self.v1).next().is_some() {
            return Err(Error::InvalidConfig("weight sets s1 and v1 must be disjoint".into()));
        }
        Ok(())
    }
}

fn round_frac(l: usize, num: usize, den: usize) -> usize {
    (l as f64 * num as f64 / den as f64).round() as usize
}

/// Map the reference 12-layer split (S1 = layers 1..10, S2 = FF of 1..4,
/// V = top 2) onto `num_layers` layers by proportional rounding. The top
/// (fast) region keeps at least one layer and wins boundary ties against
/// S1; S2 keeps at least one layer and never reaches into the fast region.
pub fn assign_weight_sets(
    num_layers: usize,
    tags: &[ParamTag],
    embedding_in_s1: bool,
) -> Result<WeightSetAssignment> {
    if num_layers < 2 {
        return Err(Error::InvalidConfig(format!(
            "weight sets need >= 2 layers, got {num_layers}"
        )));
    }
    let v_count = round_frac(num_layers, 2, 12).max(1).min(num_layers - 1);
    let v_start = num_layers - v_count + 1;
    let s1_end = round_frac(num_layers, 10, 12).min(v_start - 1);
    let s2_end = round_frac(num_layers, 4, 12).max(1).min(s1_end);

    let mut a = WeightSetAssignment {
        s1: BTreeSet::new(),
        s2: BTreeSet::new(),
        v1: BTreeSet::new(),
        v2: BTreeSet::new(),
    };
    for tag in tags {
        match tag.sublayer {
            Sublayer::Attention | Sublayer::FeedForward => {
                let l = tag.layer_index.ok_or_else(|| Error::UnknownTag(tag.name.clone()))? as usize;
                if l >= v_start {
                    a.v1.insert(tag.clone());
                    if tag.sublayer == Sublayer::Attention {
                        a.v2.insert(tag.clone());
                    }
                } else if l <= s1_end {
                    a.s1.insert(tag.clone());
                    if l <= s2_end && tag.sublayer == Sublayer::FeedForward {
                        a.s2.insert(tag.clone());
                    }
                }
            }
            Sublayer::Embedding => {
                if embedding_in_s1 {
                    a.s1.insert(tag.clone());
                }
            }
            Sublayer::Head => {}
        }
    }
    a.validate()?;
    Ok(a)
}

// ── the multiplier (Eq. 2) ──────────────────────────────────────────────

/// Eq. 2: the multiplier for one tag given phase and phi.
///
/// `phi` may be None during P1 (it is not consulted there); in P2 it is
/// required whenever the tag is in S2. `policy4_active` folds together the
/// phase-IV mode and the CKA gate.
pub fn multiplier_for(
    tag: &ParamTag,
    assignment: &WeightSetAssignment,
    phase: Phase,
    phi: Option<f64>,
    config: &PolicyConfig,
    policy4_active: bool,
) -> Result<f64> {
    let in_s = assignment.s1.contains(tag);
    let in_v = assignment.v1.contains(tag);
    if in_s && in_v {
        return Err(Error::InvalidConfig(format!(
            "tag `{}` is in both an S-set and a V-set",
            tag.name
        )));
    }
    Ok(match phase {
        Phase::P1 => {
            if in_s {
                config.c1
            } else {
                1.0 // Policy III: V1 (and everything unassigned) at full speed.
            }
        }
        Phase::P2 => {
            if policy4_active && assignment.v2.contains(tag) {
                config.c2
            } else if assignment.s2.contains(tag) {
                let phi = phi.ok_or_else(|| {
                    Error::InsufficientHistory("phi required for S2 multiplier in P2".into())
                })?;
                r_multiplier(phi, config.r_exp)
            } else {
                1.0
            }
        }
    })
}

// ── scheduler ───────────────────────────────────────────────────────────

/// One row of the policy trace, emitted every `window_size` steps: the
/// phase, phi (blank until two windows exist) and the representative
/// multipliers of the three policy-bearing sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub phase: Phase,
    pub phi: Option<f64>,
    pub k_s1: f64,
    pub k_s2: f64,
    pub k_v2: f64,
}

/// Owns the loss window, the phase latch and the weight sets for one
/// training run, and answers "what is K for this tag right now".
///
/// The `slow` flag enables Policies I/II, the `fast` flag Policy IV
/// (Policy III is the K = 1 default and needs no flag); with both off the
/// scheduler is the plain fine-tuning baseline. Frozen tags always get 0.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: PolicyConfig,
    assignment: WeightSetAssignment,
    window: LossWindow,
    state: PhaseState,
    frozen: BTreeSet<ParamTag>,
    slow: bool,
    fast: bool,
    cka_gate_open: bool,
    trace: Vec<TraceRow>,
    steps: u64,
}

impl Scheduler {
    pub fn new(
        config: PolicyConfig,
        assignment: WeightSetAssignment,
        slow: bool,
        fast: bool,
    ) -> Result<Self> {
        config.validate()?;
        assignment.validate()?;
        Ok(Scheduler {
            window: LossWindow::new(config.window_size)?,
            state: PhaseState::new(config.tau)?,
            config,
            assignment,
            frozen: BTreeSet::new(),
            slow,
            fast,
            cka_gate_open: false,
            trace: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn assignment(&self) -> &WeightSetAssignment {
        &self.assignment
    }

    /// Record the loss of the step being taken; K for step t uses losses
    /// through step t, so call this before asking for multipliers.
    pub fn observe_loss(&mut self, loss: f64) -> Result<Phase> {
        self.steps += 1;
        self.window.observe(loss)?;
        let phase = self.state.update(&self.window);
        if self.steps % self.config.window_size as u64 == 0 {
            let phi_val = phi(&self.window).ok();
            let probe = |sublayer: Sublayer, set: &BTreeSet<ParamTag>| -> f64 {
                set.iter()
                    .find(|t| t.sublayer == sublayer || set.len() < 2)
                    .or_else(|| set.iter().next())
                    .map(|t| self.multiplier(t).unwrap_or(f64::NAN))
                    .unwrap_or(1.0)
            };
            // Representative multipliers: an S1 tag outside S2 (attention
            // of a bottom layer), any S2 tag, any V2 tag.
            let k_s1 = probe(Sublayer::Attention, &self.assignment.s1);
            let k_s2 = probe(Sublayer::FeedForward, &self.assignment.s2);
            let k_v2 = probe(Sublayer::Attention, &self.assignment.v2);
            self.trace.push(TraceRow { step: self.steps, phase, phi: phi_val, k_s1, k_s2, k_v2 });
        }
        Ok(phase)
    }

    pub fn phase(&self) -> Phase {
        self.state.phase()
    }

    pub fn phi(&self) -> Option<f64> {
        phi(&self.window).ok()
    }

    pub fn steps_observed(&self) -> u64 {
        self.steps
    }

    /// Latest CKA-gate verdict; consulted only in `cka_gated` mode.
    pub fn set_cka_gate(&mut self, still_dropping: bool) {
        self.cka_gate_open = still_dropping;
    }

    /// Force K = 0 for these tags for the whole run.
    pub fn freeze(&mut self, tags: impl IntoIterator<Item = ParamTag>) {
        self.frozen.extend(tags);
    }

    pub fn frozen(&self) -> &BTreeSet<ParamTag> {
        &self.frozen
    }

    pub fn policy4_active(&self) -> bool {
        self.fast
            && self.state.phase() == Phase::P2
            && match self.config.policy4_mode {
                Policy4Mode::Off => false,
                Policy4Mode::Always => true,
                Policy4Mode::CkaGated => self.cka_gate_open,
            }
    }

    /// The multiplier for one tag at the current step.
    pub fn multiplier(&self, tag: &ParamTag) -> Result<f64> {
        if self.frozen.contains(tag) {
            return Ok(0.0);
        }
        let phase = self.state.phase();
        // With the slow policies disabled, S-set tags fall through to the
        // K = 1 default; with fast disabled, policy4_active() is false.
        if !self.slow {
            let in_v2 = self.assignment.v2.contains(tag);
            return Ok(if phase == Phase::P2 && self.policy4_active() && in_v2 {
                self.config.c2
            } else {
                1.0
            });
        }
        multiplier_for(tag, &self.assignment, phase, self.phi(), &self.config, self.policy4_active())
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }
}

// ── NoisyTune ───────────────────────────────────────────────────────────

/// Perturb every tensor with elementwise uniform noise on
/// `[-lambda * sigma, +lambda * sigma]`, sigma being that tensor's own
/// standard deviation (constant tensors are left alone). Deterministic in
/// `seed`; tensors are visited in roster order.
pub fn noisytune_perturb(params: &mut ModelParams, lambda: f64, seed: u64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument {
            op: "noisytune_perturb",
            detail: format!("lambda must be finite and >= 0, got {lambda}"),
        });
    }
    if lambda == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.params_mut() {
        let sigma = p.value.std();
        if sigma == 0.0 {
            continue;
        }
        let bound = lambda * sigma;
        for x in p.value.data_mut() {
            *x += rng.gen_range(-bound..=bound);
        }
    }
    Ok(())
}
