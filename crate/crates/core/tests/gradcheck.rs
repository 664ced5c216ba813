//! Finite-difference check of the full-model gradient.
//!
//! Central differences on the scalar training loss, sampled coordinates
//! in every parameter tensor, against the tape's reverse sweep. With f64
//! and h = 1e-6 the quotient carries ~1e-10 rounding noise (eps/h on an
//! O(1) loss), so the error metric floors its denominator at 1e-5:
//! gradients above that are held to 1e-4 relative, smaller ones to 1e-9
//! absolute — an order above the noise, four below a real sign or scale
//! bug.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slowfast_core::model::{build_graph, build_model, Batch, HeadKind, HeadRows, ModelConfig, ModelParams};
use slowfast_core::tape::Tape;

const H: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-5;

fn loss_at(params: &ModelParams, batch: &Batch, rows: &HeadRows, targets: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let g = build_graph(params, &mut tape, batch, rows).unwrap();
    let loss = tape.cross_entropy(g.logits, targets).unwrap();
    tape.scalar(loss)
}

fn analytic_grads(
    params: &ModelParams,
    batch: &Batch,
    rows: &HeadRows,
    targets: &[usize],
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let g = build_graph(params, &mut tape, batch, rows).unwrap();
    let loss = tape.cross_entropy(g.logits, targets).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    g.bindings
        .iter()
        .map(|&(idx, leaf)| {
            grads.take(leaf).unwrap_or_else(|| vec![0.0; params.params()[idx].value.numel()])
        })
        .collect()
}

fn check_all_params(head: HeadKind, rows: HeadRows, targets: &[usize], seed: u64) -> usize {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        vocab_size: 24,
        max_seq_len: 10,
        head,
    };
    let mut params = build_model(&cfg, seed).unwrap();
    let batch = Batch { sentences: vec![vec![1, 5, 9, 13, 2], vec![1, 20, 3, 7]] };
    let grads = analytic_grads(&params, &batch, &rows, targets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut checked = 0;
    let mut worst: (f64, String) = (0.0, String::new());

    for idx in 0..params.params().len() {
        let numel = params.params()[idx].value.numel();
        let name = params.params()[idx].tag.name.clone();
        // Every coordinate of small tensors, a random sample of large ones.
        let coords: Vec<usize> = if numel <= 6 {
            (0..numel).collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..numel)).collect()
        };
        for c in coords {
            let orig = params.params()[idx].value.data()[c];
            params.params_mut()[idx].value.data_mut()[c] = orig + H;
            let up = loss_at(&params, &batch, &rows, targets);
            params.params_mut()[idx].value.data_mut()[c] = orig - H;
            let down = loss_at(&params, &batch, &rows, targets);
            params.params_mut()[idx].value.data_mut()[c] = orig;

            let fd = (up - down) / (2.0 * H);
            let an = grads[idx][c];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(ABS_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{c}]: fd {fd:e} vs tape {an:e}"));
            }
            assert!(
                rel < REL_TOL,
                "{name}[{c}]: finite difference {fd:e} vs tape {an:e} (rel {rel:e})"
            );
            checked += 1;
        }
    }
    eprintln!("checked {checked} coordinates, worst rel err {:.3e} at {}", worst.0, worst.1);
    checked
}

#[test]
fn classification_loss_gradients_match_finite_differences() {
    let n = check_all_params(
        HeadKind::Classification { num_classes: 3 },
        HeadRows::Cls,
        &[0, 2],
        11,
    );
    assert!(n >= 100, "expected to exercise >= 100 coordinates, got {n}");
}

#[test]
fn tagging_loss_gradients_match_finite_differences() {
    // 4 + 3 content positions -> 7 targets.
    check_all_params(
        HeadKind::Tagging { num_tags: 3 },
        HeadRows::Content,
        &[0, 1, 2, 0, 0, 1, 2],
        23,
    );
}

#[test]
fn masked_lm_loss_gradients_match_finite_differences() {
    // Explicit rows as the MLM trainer uses them.
    check_all_params(
        HeadKind::MaskedLm,
        HeadRows::Explicit(vec![0, 3, 6, 8]),
        &[5, 9, 20, 3],
        31,
    );
}
