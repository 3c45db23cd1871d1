mod common;

use canonmp::relax::caratheodory_reduce;
use common::oracles::{brute_force_best, instance, means, Instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(inst: &Instance, brute: bool) -> Result<(), TestCaseError> {
    let m = inst.points[0].len() - 1;
    let all: Vec<usize> = (0..inst.points.len()).collect();
    let before = means(&inst.points, &all, &inst.weights);
    let r = caratheodory_reduce(&inst.points, &inst.weights).unwrap();
    prop_assert!(r.indices.len() <= m + 1);
    prop_assert!(r.weights.iter().all(|w| *w > 0.0));
    prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let after = means(&inst.points, &r.indices, &r.weights);
    for j in 1..=m {
        prop_assert!((after[j] - before[j]).abs() <= 1e-12, "mean {} moved {:e}", j, after[j] - before[j]);
    }
    prop_assert!(after[0] >= before[0] - 1e-12, "f0 mean dropped {} -> {}", before[0], after[0]);
    if brute {
        let best = brute_force_best(inst);
        prop_assert!(best.is_some(), "brute force found no support of size <= m+1");
        prop_assert!(after[0] <= best.unwrap() + 1e-9);
    }
    Ok(())
}

#[test]
fn hundred_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let m = 1 + case % 3;
        let n = rng.random_range(1..=10);
        let inst = instance(&mut rng, m, n, case % 2 == 1);
        check(&inst, m <= 2).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reduction_invariants(seed in any::<u64>(), m in 1usize..=3, n in 1usize..=10, integer in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, m, n, integer);
        check(&inst, m <= 2)?;
    }
}
