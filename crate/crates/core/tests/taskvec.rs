mod common;

use common::*;
use deltamerge::synth::{self, Distribution, SynthSpec, TensorSpec};
use deltamerge::taskvec::{
    apply_task_vector, compute_task_vector, dare_drop, diff_checkpoints, task_arithmetic_merge,
    weighted_average, ApplyOptions, AveragingWeights, BaseCheck,
};
use deltamerge::tensorio::Dtype;
use proptest::prelude::*;
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

fn one_tensor(name: &str, values: &[f32]) -> Dense {
    vec![(name.to_string(), values.to_vec())]
}

#[test]
fn dare_mask_matches_an_independent_splitmix() {
    let name = "blocks.0.attn";
    let values: Vec<f32> = (1..=500).map(|i| i as f32).collect();
    let base = to_checkpoint(&one_tensor(name, &vec![0.0; 500]), Dtype::F32);
    let tuned = to_checkpoint(&one_tensor(name, &values), Dtype::F32);
    let tv = compute_task_vector(&tuned, &base).unwrap();
    for (seed, p) in [(0u64, 0.3), (17, 0.5), (u64::MAX, 0.9)] {
        let dropped = dare_drop(&tv, p, seed).unwrap();
        let mut sm = SplitMix64::seed_from_u64(seed ^ synth::fnv1a64(name.as_bytes()));
        let rescale = 1.0f32 / (1.0f32 - p as f32);
        for (i, &v) in dropped.deltas[name].values.iter().enumerate() {
            let u = (sm.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let expected = if u < p { 0.0 } else { values[i] * rescale };
            assert_eq!(v.to_bits(), expected.to_bits(), "seed {seed} index {i}");
        }
    }
}

#[test]
fn dare_is_unbiased_across_seeds() {
    let base = to_checkpoint(&one_tensor("w", &[0.0; 4]), Dtype::F32);
    let tuned = to_checkpoint(&one_tensor("w", &[1.0, -2.0, 0.5, 3.0]), Dtype::F32);
    let tv = compute_task_vector(&tuned, &base).unwrap();
    let p = 0.4;
    let seeds = 10_000;
    let mut sums = [0f64; 4];
    for seed in 0..seeds {
        let d = dare_drop(&tv, p, seed).unwrap();
        for (s, v) in sums.iter_mut().zip(&d.deltas["w"].values) {
            *s += *v as f64;
        }
    }
    for (i, &x) in tv.deltas["w"].values.iter().enumerate() {
        let x = x as f64;
        let mean = sums[i] / seeds as f64;
        // each sample is x/(1-p) with probability 1-p, else 0
        let sd = (x * x * p / (1.0 - p)).sqrt() / (seeds as f64).sqrt();
        assert!((mean - x).abs() < 3.0 * sd, "element {i}: mean {mean} vs {x}");
    }
}

#[test]
fn dare_with_zero_drop_is_identity_and_rejects_one() {
    let base = to_checkpoint(&one_tensor("w", &[0.0; 3]), Dtype::F32);
    let tuned = to_checkpoint(&one_tensor("w", &[1.0, -2.0, 0.25]), Dtype::F32);
    let tv = compute_task_vector(&tuned, &base).unwrap();
    assert_eq!(dare_drop(&tv, 0.0, 5).unwrap(), tv);
    assert!(dare_drop(&tv, 1.0, 5).is_err());
    assert!(dare_drop(&tv, -0.1, 5).is_err());
}

#[test]
fn weighted_average_equals_task_arithmetic_from_either_model() {
    let mut r = rng(11);
    let layout = random_layout(&mut r, 3_000);
    let a = to_checkpoint(&random_dense(&mut r, &layout), Dtype::F32);
    let b = to_checkpoint(&random_dense(&mut r, &layout), Dtype::F32);
    for w in [0.0, 0.3, 0.5, 0.9, 1.0] {
        let wa = weighted_average(&[a.clone(), b.clone()], &AveragingWeights::pair(w).unwrap()).unwrap();
        // w·a + (1−w)·b = b + w·(a − b)
        let tv = compute_task_vector(&a, &b).unwrap();
        let ta = task_arithmetic_merge(&b, &[tv], &[w], ApplyOptions::default()).unwrap();
        for ((_, x), (_, y)) in from_checkpoint(&wa).iter().zip(&from_checkpoint(&ta)) {
            for (x, y) in x.iter().zip(y) {
                assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "w={w}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn base_fingerprint_mismatch_is_rejected_unless_allowed() {
    let base = to_checkpoint(&one_tensor("w", &[1.0, 2.0]), Dtype::F32);
    let other_base = to_checkpoint(&one_tensor("w", &[1.0, 2.5]), Dtype::F32);
    let tuned = to_checkpoint(&one_tensor("w", &[3.0, 2.0]), Dtype::F32);
    let tv = compute_task_vector(&tuned, &base).unwrap();
    assert!(apply_task_vector(&other_base, &tv, 1.0, ApplyOptions::default()).is_err());
    let opts = ApplyOptions {
        base_check: BaseCheck::AllowMismatch,
        output_dtype: None,
    };
    let out = apply_task_vector(&other_base, &tv, 1.0, opts).unwrap();
    assert_eq!(from_checkpoint(&out)[0].1, vec![3.0, 2.5]);
}

#[test]
fn diff_of_constant_checkpoints_has_closed_form() {
    let tensors = vec![
        TensorSpec { name: "a".into(), shape: vec![3, 4], dtype: Dtype::F32 },
        TensorSpec { name: "b".into(), shape: vec![25], dtype: Dtype::F16 },
    ];
    let constant = |value| SynthSpec {
        seed: 0,
        tensors: tensors.clone(),
        distribution: Distribution::Constant { value },
        conflict: None,
    };
    let base = synth::generate_checkpoint(&constant(0.5)).unwrap();
    let tuned = synth::generate_checkpoint(&constant(-1.0)).unwrap();
    let report = diff_checkpoints(&base, &tuned).unwrap();
    assert_eq!(report.total.numel, 37);
    assert_eq!(report.total.nonzero, 37);
    assert_eq!(report.total.max_abs, 1.5);
    assert!((report.total.l2 - 1.5 * 37f64.sqrt()).abs() < 1e-12);
    assert_eq!(report.tensors["a"].l2, 1.5 * 12f64.sqrt());
    assert_eq!(report.tensors["b"].nonzero_fraction, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_vector_is_antisymmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let layout = random_layout(&mut r, 500);
        let a = to_checkpoint(&random_dense(&mut r, &layout), Dtype::F32);
        let b = to_checkpoint(&random_dense(&mut r, &layout), Dtype::F32);
        let ab = compute_task_vector(&a, &b).unwrap();
        let ba = compute_task_vector(&b, &a).unwrap();
        for (name, d) in &ab.deltas {
            let neg: Vec<f32> = ba.deltas[name].values.iter().map(|x| -x).collect();
            prop_assert_eq!(&d.values, &neg);
        }
    }

    #[test]
    fn applying_own_task_vector_recovers_tuned(seed in any::<u64>()) {
        // exact on the 1/8 grid; `+ 0.0` drops negative zeros, which `b + (t − b)` cannot reproduce
        let mut r = rng(seed);
        let layout = random_layout(&mut r, 500);
        let grid = |d: Dense| -> Dense {
            d.into_iter().map(|(n, v)| (n, v.into_iter().map(|x| (x * 8.0).round() / 8.0 + 0.0).collect())).collect()
        };
        let base = to_checkpoint(&grid(random_dense(&mut r, &layout)), Dtype::F32);
        let tuned = to_checkpoint(&grid(random_dense(&mut r, &layout)), Dtype::F32);
        let tv = compute_task_vector(&tuned, &base).unwrap();
        let out = apply_task_vector(&base, &tv, 1.0, ApplyOptions::default()).unwrap();
        prop_assert_eq!(out.to_bytes(), tuned.to_bytes());
        let zero = apply_task_vector(&base, &tv, 0.0, ApplyOptions::default()).unwrap();
        prop_assert_eq!(zero.to_bytes(), base.to_bytes());
    }
}
