//! Oracles for the sliced-Wasserstein alignment term.
//!
//! The production code computes SWD through the autodiff tape (permute,
//! matmul, sort). These tests pin its value against two references that share
//! none of that machinery: a from-scratch scalar re-implementation driven by
//! the same seeded stream, and — for the 1-D transport cost — brute-force
//! enumeration of every assignment. Distribution-level invariants run as
//! property tests over a thousand random instances each. The references live
//! in `common` so the acceptance run uses the same code.

mod common;

use common::{brute_force_assignment, scalar_swd, tape_swd, tape_w1};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vibe_core::nd::Tensor;

#[test]
fn swd_agrees_with_a_scalar_reimplementation_on_fifty_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51ced);
    for i in 0..50 {
        let (b, d, h, w) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        let m = rng.gen_range(1..=32);
        let seed = rng.gen::<u64>();
        let z_hat = Tensor::<f64>::randn(&mut rng, &[b, d, h, w], 0.0, 1.5);
        let z = Tensor::<f64>::randn(&mut rng, &[b, d, h, w], 0.4, 0.9);
        let got = tape_swd(&z_hat, &z, m, seed);
        let want = scalar_swd(&z_hat, &z, m, seed);
        assert!(
            (got - want).abs() <= 1e-9,
            "instance {i} ({b},{d},{h},{w}) m={m}: tape {got} vs scalar {want}"
        );
    }
}

#[test]
fn sorted_pairing_attains_the_optimal_assignment_up_to_length_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a551);
    let lattice = [-1.0, -0.5, 0.0, 0.5, 1.0];
    for n in 1..=8usize {
        // Continuous draws, then lattice draws where ties are guaranteed.
        for rep in 0..40 {
            let (a, b): (Vec<f64>, Vec<f64>) = if rep < 20 {
                (
                    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
            } else {
                (
                    (0..n).map(|_| *lattice.choose(&mut rng).unwrap()).collect(),
                    (0..n).map(|_| *lattice.choose(&mut rng).unwrap()).collect(),
                )
            };
            let got = tape_w1(&a, &b);
            let want = brute_force_assignment(&a, &b);
            assert!(
                (got - want).abs() < 1e-12,
                "n={n} rep={rep}: sorted pairing {got} vs brute force {want}\n a={a:?}\n b={b:?}"
            );
        }
    }
}

/// Strategy: a latent shape, matching value vectors, a projection count, and
/// a seed.
fn swd_instance() -> impl Strategy<
    Value = (
        (usize, usize, usize, usize),
        Vec<f64>,
        Vec<f64>,
        usize,
        u64,
    ),
> {
    ((1usize..=2, 1usize..=4, 1usize..=3, 1usize..=3)).prop_flat_map(|(b, d, h, w)| {
        let n = b * d * h * w;
        (
            Just((b, d, h, w)),
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
            1usize..=12,
            any::<u64>(),
        )
    })
}

fn to_tensor(vals: &[f64], (b, d, h, w): (usize, usize, usize, usize)) -> Tensor<f64> {
    Tensor::from_f64s(vals, &[b, d, h, w]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn identical_clouds_have_exactly_zero_distance(
        (shape, vals, _, m, seed) in swd_instance()
    ) {
        let z = to_tensor(&vals, shape);
        prop_assert_eq!(tape_swd(&z, &z, m, seed), 0.0);
    }

    #[test]
    fn swapping_the_clouds_does_not_change_the_distance(
        (shape, a, b, m, seed) in swd_instance()
    ) {
        let x = to_tensor(&a, shape);
        let y = to_tensor(&b, shape);
        prop_assert_eq!(tape_swd(&x, &y, m, seed), tape_swd(&y, &x, m, seed));
    }

    #[test]
    fn scaling_both_clouds_scales_the_distance(
        (shape, a, b, m, seed) in swd_instance(),
        c in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0]
    ) {
        let x = to_tensor(&a, shape);
        let y = to_tensor(&b, shape);
        let base = tape_swd(&x, &y, m, seed);
        let xs = to_tensor(&a.iter().map(|v| c * v).collect::<Vec<_>>(), shape);
        let ys = to_tensor(&b.iter().map(|v| c * v).collect::<Vec<_>>(), shape);
        let scaled = tape_swd(&xs, &ys, m, seed);
        let want = c.abs() * base;
        prop_assert!(
            (scaled - want).abs() <= 1e-9 * want.abs().max(1.0),
            "c={}: {} vs {}", c, scaled, want
        );
    }

    #[test]
    fn shuffling_sample_positions_changes_nothing(
        (shape, a, b, m, seed) in swd_instance(),
        shuffle_seed in any::<u64>()
    ) {
        let (bb, d, h, w) = shape;
        let x = to_tensor(&a, shape);
        let y = to_tensor(&b, shape);

        // Move whole channel vectors between (batch, h, w) slots.
        let mut slots: Vec<usize> = (0..bb * h * w).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut shuffled = vec![0.0; a.len()];
        for (dst, &src) in slots.iter().enumerate() {
            let (sb, sh, sw) = (src / (h * w), (src / w) % h, src % w);
            let (tb, th, tw) = (dst / (h * w), (dst / w) % h, dst % w);
            for c in 0..d {
                shuffled[((tb * d + c) * h + th) * w + tw] =
                    a[((sb * d + c) * h + sh) * w + sw];
            }
        }
        let xp = to_tensor(&shuffled, shape);
        prop_assert_eq!(tape_swd(&x, &y, m, seed), tape_swd(&xp, &y, m, seed));
    }
}
