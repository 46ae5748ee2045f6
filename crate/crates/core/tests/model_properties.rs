use mpic_core::model::{Model, ModelConfig};
use proptest::prelude::*;

fn model() -> Model {
    Model::build(ModelConfig::new(2, 2, 8, 50, 4, 99)).unwrap()
}

#[test]
fn single_token_prefill_then_decode_matches_two_token_prefill() {
    let m = model();
    let (mut kv, _) = m.full_prefill(&[7]).unwrap();
    assert_eq!(kv.n_tokens(), 1);
    let decoded = m.decode_step(&mut kv, 13, 1).unwrap();
    let (full_kv, full) = m.full_prefill(&[7, 13]).unwrap();
    assert!(decoded.max_abs_diff(&full) <= 1e-5);
    assert!(kv.max_abs_diff(&full_kv).unwrap() <= 1e-5);
}

#[test]
fn greedy_generation_is_deterministic() {
    let a = model().generate_greedy(&[1, 2, 3, 4, 5], 12).unwrap();
    let b = model().generate_greedy(&[1, 2, 3, 4, 5], 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
}

#[test]
fn causality_under_perturbation() {
    let m = model();
    let base: Vec<u32> = (0..16).map(|i| (i * 3 % 50) as u32).collect();
    let full = |toks: &[u32]| -> Vec<Vec<f32>> {
        // logits at every position via successive prefixes
        (1..=toks.len())
            .map(|n| m.full_prefill(&toks[..n]).unwrap().1 .0)
            .collect()
    };
    let reference = full(&base);
    for j in 0..base.len() {
        let mut p = base.clone();
        p[j] = (p[j] + 1) % 50;
        let perturbed = full(&p);
        for pos in 0..j {
            assert_eq!(reference[pos], perturbed[pos], "position {pos} changed by token {j}");
        }
        assert_ne!(reference[j], perturbed[j]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prefill_decode_chain_matches_one_shot(
        prompt in prop::collection::vec(0u32..50, 1..24),
        tail in prop::collection::vec(0u32..50, 1..6),
    ) {
        let m = model();
        let (mut kv, mut logits) = m.full_prefill(&prompt).unwrap();
        for &t in &tail {
            let pos = kv.n_tokens();
            logits = m.decode_step(&mut kv, t, pos).unwrap();
        }
        let whole: Vec<u32> = prompt.iter().chain(&tail).copied().collect();
        let (kv_once, once) = m.full_prefill(&whole).unwrap();
        prop_assert!(logits.max_abs_diff(&once) <= 1e-5);
        prop_assert!(kv.max_abs_diff(&kv_once).unwrap() <= 1e-5);
    }
}
