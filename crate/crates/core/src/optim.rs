//! Adam with linear warmup and a per-parameter multiplier hook.
//!
//! The hook is the single integration point for every learning-rate policy
//! in this crate: the caller supplies a multiplier `K` per parameter tensor
//! and the effective step size becomes `base_lr * warmup * K`, applied
//! *after* moment normalization. `K = 0` freezes a tensor bit-exactly
//! (moments still advance); `K = 1` is plain Adam.
//!
//! Setting `betas = (0, 0)` and `eps = 0` selects plain SGD
//! (`theta -= base_lr * warmup * K * g`) instead of the degenerate Adam
//! those constants would imply (sign-SGD with 0/0 on zero gradients). The
//! SGD mode exists so multiplier semantics can be pinned down bitwise:
//! `K = 0.5` is exactly equivalent to halving the base learning rate,
//! because scaling by a power of two commutes with rounding.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// The degenerate constants that select plain SGD.
    pub fn sgd() -> Self {
        AdamConfig { beta1: 0.0, beta2: 0.0, eps: 0.0 }
    }

    pub fn is_sgd_mode(&self) -> bool {
        self.beta1 == 0.0 && self.beta2 == 0.0 && self.eps == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) || !(self.eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adam requires betas in [0,1) and eps >= 0, got ({}, {}, {})",
                self.beta1, self.beta2, self.eps
            )));
        }
        if self.eps == 0.0 && !self.is_sgd_mode() {
            return Err(Error::InvalidConfig(
                "eps = 0 is only valid in SGD mode (betas must also be 0)".into(),
            ));
        }
        Ok(())
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// Linear warmup factor for a 1-based step index: ramps from
/// `1/warmup_steps` to 1 over the first `warmup_steps` steps, then stays 1.
/// `warmup_steps = 0` disables warmup.
pub fn warmup_factor(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One update of a single tensor. `step` is 1-based and shared by all
/// tensors of the same optimizer step; `k` is the policy multiplier.
///
/// Non-finite gradient entries abort before any state is touched.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    data: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: u64,
    base_lr: f64,
    warmup_steps: u64,
    k: f64,
) -> Result<()> {
    if grad.len() != data.len() || state.m.len() != data.len() || state.v.len() != data.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "data {} / grad {} / m {} / v {}",
                data.len(),
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { context: "gradient".into() });
    }
    let lr_eff = base_lr * warmup_factor(step, warmup_steps) * k;

    if cfg.is_sgd_mode() {
        if lr_eff != 0.0 {
            for (x, g) in data.iter_mut().zip(grad) {
                *x -= lr_eff * g;
            }
        }
        return Ok(());
    }

    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        // K = 0 must leave parameters bit-identical; skipping the write also
        // avoids 0 * (0/0) = NaN when eps is tiny and the gradient is zero.
        if lr_eff != 0.0 {
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            data[i] -= lr_eff * (mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// A pending update for one named tensor.
pub struct ParamUpdate<'a> {
    pub label: &'a str,
    pub data: &'a mut [f64],
    pub grad: &'a [f64],
    pub k: f64,
}

/// Drives [`adam_step`] across a fixed roster of tensors, owning their
/// moment buffers and the shared step counter. Tensor order must be stable
/// across calls; it is the roster the optimizer was built with.
pub struct Optimizer {
    cfg: AdamConfig,
    base_lr: f64,
    warmup_steps: u64,
    step: u64,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(sizes: &[usize], base_lr: f64, cfg: AdamConfig, warmup_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("base_lr must be >= 0, got {base_lr}")));
        }
        Ok(Optimizer {
            cfg,
            base_lr,
            warmup_steps,
            step: 0,
            states: sizes.iter().map(|&n| AdamState::zeros(n)).collect(),
        })
    }

    /// Rebuild from checkpointed state.
    pub fn from_parts(
        cfg: AdamConfig,
        base_lr: f64,
        warmup_steps: u64,
        step: u64,
        states: Vec<AdamState>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, base_lr, warmup_steps, step, states })
    }

    /// Apply one optimizer step to every tensor in roster order. The
    /// iterator must yield exactly the tensors the optimizer was built
    /// with. A non-finite gradient aborts with the offending tensor named.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = ParamUpdate<'a>>,
    {
        self.step += 1;
        let mut count = 0;
        for (i, u) in updates.into_iter().enumerate() {
            let state = self.states.get_mut(i).ok_or_else(|| Error::InvalidArgument {
                op: "Optimizer::step",
                detail: format!("more tensors than the optimizer was built for ({})", i + 1),
            })?;
            adam_step(u.data, u.grad, state, &self.cfg, self.step, self.base_lr, self.warmup_steps, u.k)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => {
                        Error::NonFiniteGrad { tag: u.label.to_string(), step: self.step }
                    }
                    other => other,
                })?;
            count += 1;
        }
        if count != self.states.len() {
            return Err(Error::InvalidArgument {
                op: "Optimizer::step",
                detail: format!("expected {} tensors, got {count}", self.states.len()),
            });
        }
        Ok(())
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Oracle: two Adam steps on a scalar computed independently (Python,
    // same IEEE f64 semantics), frozen here. theta0 = 0.5, lr = 0.05,
    // betas (0.9, 0.999), eps 1e-8, grads 0.3 then -0.1.
    const ORACLE_M: [f64; 2] = [0.029999999999999992, 0.016999999999999994];
    const ORACLE_V: [f64; 2] = [9.000000000000007e-05, 9.991000000000009e-05];
    const ORACLE_THETA: [f64; 2] = [0.4500000016666666, 0.4299890739640404];

    #[test]
    fn two_steps_match_frozen_oracle() {
        let cfg = AdamConfig::default();
        let mut data = [0.5];
        let mut state = AdamState::zeros(1);
        for (t, g) in [(1u64, 0.3), (2, -0.1)] {
            adam_step(&mut data, &[g], &mut state, &cfg, t, 0.05, 0, 1.0).unwrap();
            let i = (t - 1) as usize;
            assert_relative_eq!(state.m[0], ORACLE_M[i], max_relative = 1e-12);
            assert_relative_eq!(state.v[0], ORACLE_V[i], max_relative = 1e-12);
            assert_relative_eq!(data[0], ORACLE_THETA[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn warmup_scales_first_step() {
        // Same oracle run but warmup_steps = 10: factor 0.1 at t = 1.
        let cfg = AdamConfig::default();
        let mut data = [0.5];
        let mut state = AdamState::zeros(1);
        adam_step(&mut data, &[0.3], &mut state, &cfg, 1, 0.05, 10, 1.0).unwrap();
        assert_relative_eq!(data[0], 0.4950000001666667, max_relative = 1e-12);
    }

    #[test]
    fn warmup_factor_ramp() {
        assert_eq!(warmup_factor(1, 10), 0.1);
        assert_eq!(warmup_factor(5, 10), 0.5);
        assert_eq!(warmup_factor(10, 10), 1.0);
        assert_eq!(warmup_factor(11, 10), 1.0);
        assert_eq!(warmup_factor(1, 0), 1.0);
    }

    #[test]
    fn k_zero_is_bit_identical_freeze() {
        let cfg = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let original: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = original.clone();
        let mut state = AdamState::zeros(64);
        for t in 1..=25u64 {
            let grad: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            adam_step(&mut data, &grad, &mut state, &cfg, t, 0.01, 5, 0.0).unwrap();
        }
        assert!(
            data.iter().zip(&original).all(|(a, b)| a.to_bits() == b.to_bits()),
            "K = 0 must not move parameters at all"
        );
        // Moments still advanced, so unfreezing later sees warm state.
        assert!(state.m.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn k_one_equals_unhooked_adam() {
        let cfg = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let init: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> =
            (0..10).map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

        let run = |k: Option<f64>| -> Vec<f64> {
            let mut data = init.clone();
            let mut state = AdamState::zeros(32);
            for (i, g) in grads.iter().enumerate() {
                // k = None means "no hook": the textbook update, written out
                // here as the reference implementation.
                match k {
                    Some(k) => {
                        adam_step(&mut data, g, &mut state, &cfg, (i + 1) as u64, 0.01, 0, k).unwrap()
                    }
                    None => {
                        let t = (i + 1) as u64;
                        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                        for j in 0..data.len() {
                            state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g[j];
                            state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                            let mhat = state.m[j] / bc1;
                            let vhat = state.v[j] / bc2;
                            data[j] -= 0.01 * (mhat / (vhat.sqrt() + cfg.eps));
                        }
                    }
                }
            }
            data
        };
        let hooked = run(Some(1.0));
        let plain = run(None);
        assert!(hooked.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sgd_mode_k_half_is_bitwise_halved_lr() {
        let cfg = AdamConfig::sgd();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let init: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> =
            (0..20).map(|_| (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

        let run = |lr: f64, k: f64| -> Vec<f64> {
            let mut data = init.clone();
            let mut state = AdamState::zeros(48);
            for (i, g) in grads.iter().enumerate() {
                adam_step(&mut data, g, &mut state, &cfg, (i + 1) as u64, lr, 7, k).unwrap();
            }
            data
        };
        let with_k = run(0.02, 0.5);
        let halved = run(0.01, 1.0);
        assert!(
            with_k.iter().zip(&halved).all(|(a, b)| a.to_bits() == b.to_bits()),
            "K = 0.5 must equal halving base_lr bitwise in SGD mode"
        );
        // Non-power-of-two multipliers agree to rounding, not bitwise.
        let with_k3 = run(0.02, 0.3);
        let scaled = run(0.02 * 0.3, 1.0);
        for (a, b) in with_k3.iter().zip(&scaled) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
    }

    #[test]
    fn sgd_mode_is_plain_descent() {
        let cfg = AdamConfig::sgd();
        let mut data = [2.0, -1.0];
        let mut state = AdamState::zeros(2);
        adam_step(&mut data, &[0.5, -0.25], &mut state, &cfg, 1, 0.1, 0, 1.0).unwrap();
        assert_eq!(data, [2.0 - 0.1 * 0.5, -1.0 + 0.1 * 0.25]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_label() {
        let mut opt = Optimizer::new(&[2], 0.01, AdamConfig::default(), 0).unwrap();
        let mut data = vec![0.0, 0.0];
        let err = opt
            .step([ParamUpdate { label: "layer3.ff.w1", data: &mut data, grad: &[1.0, f64::NAN], k: 1.0 }])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer3.ff.w1") && msg.contains("step 1"), "got: {msg}");
        assert!(err.is_numerical());
    }

    #[test]
    fn optimizer_enforces_roster_size() {
        let mut opt = Optimizer::new(&[2, 3], 0.01, AdamConfig::default(), 0).unwrap();
        let mut a = vec![0.0; 2];
        let err = opt
            .step([ParamUpdate { label: "a", data: &mut a, grad: &[0.1, 0.1], k: 1.0 }])
            .unwrap_err();
        assert!(err.to_string().contains("expected 2 tensors"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AdamConfig { beta1: 1.0, beta2: 0.999, eps: 1e-8 }.validate().is_err());
        assert!(AdamConfig { beta1: 0.9, beta2: 0.999, eps: -1.0 }.validate().is_err());
        assert!(AdamConfig { beta1: 0.9, beta2: 0.999, eps: 0.0 }.validate().is_err());
        assert!(AdamConfig::sgd().validate().is_ok());
        assert!(Optimizer::new(&[1], f64::NAN, AdamConfig::default(), 0).is_err());
    }
}
