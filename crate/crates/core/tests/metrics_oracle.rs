mod common;

use common::{oracle_assd, oracle_overlap};
use geoprompt::metrics::{assd, dsc, iou};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 16;

#[test]
fn two_hundred_random_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = std::time::Instant::now();
    for _ in 0..200 {
        let (p, g) = (common::random_mask(&mut rng, N), common::random_mask(&mut rng, N));
        let (d, j) = oracle_overlap(&p, &g);
        assert_eq!(dsc(&p, &g, (N, N)).unwrap(), d);
        assert_eq!(iou(&p, &g, (N, N)).unwrap(), j);
        assert!((assd(&p, &g, (N, N)).unwrap() - oracle_assd(&p, &g, N)).abs() < 1e-9);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn sparse_and_empty_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..100 {
        let mut p = vec![false; N * N];
        let mut g = vec![false; N * N];
        for _ in 0..k % 4 {
            p[rng.random_range(0..N * N)] = true;
        }
        for _ in 0..(k / 4) % 3 {
            g[rng.random_range(0..N * N)] = true;
        }
        assert!((assd(&p, &g, (N, N)).unwrap() - oracle_assd(&p, &g, N)).abs() < 1e-9);
    }
}

fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(proptest::bool::weighted(0.2), N * N)
}

proptest! {
    #[test]
    fn metrics_are_symmetric(p in mask_strategy(), g in mask_strategy()) {
        prop_assert_eq!(dsc(&p, &g, (N, N)).unwrap(), dsc(&g, &p, (N, N)).unwrap());
        prop_assert_eq!(iou(&p, &g, (N, N)).unwrap(), iou(&g, &p, (N, N)).unwrap());
        prop_assert!((assd(&p, &g, (N, N)).unwrap() - assd(&g, &p, (N, N)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn iou_bounded_by_dice_and_related(p in mask_strategy(), g in mask_strategy()) {
        let d = dsc(&p, &g, (N, N)).unwrap();
        let j = iou(&p, &g, (N, N)).unwrap();
        prop_assert!(j <= d);
        if j > 0.0 && j < 1.0 {
            prop_assert!(j < d);
        }
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance(p in mask_strategy(), g in mask_strategy(), dy in 0usize..8, dx in 0usize..8) {
        let big = N + 8;
        let shift = |m: &[bool]| {
            let mut out = vec![false; big * big];
            for (i, &v) in m.iter().enumerate() {
                out[(i / N + dy) * big + i % N + dx] = v;
            }
            out
        };
        let (sp, sg) = (shift(&p), shift(&g));
        prop_assert_eq!(dsc(&p, &g, (N, N)).unwrap(), dsc(&sp, &sg, (big, big)).unwrap());
        prop_assert_eq!(iou(&p, &g, (N, N)).unwrap(), iou(&sp, &sg, (big, big)).unwrap());
        let both = p.iter().any(|&v| v) && g.iter().any(|&v| v);
        if both {
            prop_assert!((assd(&p, &g, (N, N)).unwrap() - assd(&sp, &sg, (big, big)).unwrap()).abs() < 1e-9);
        }
    }
}
