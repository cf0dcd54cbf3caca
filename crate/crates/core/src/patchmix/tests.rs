use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Array;

/// Patch `(i, j)` carries the single value `i * 1000 + j`.
fn labelled(n: usize, t: usize) -> PatchBatch {
    let data = (0..n)
        .flat_map(|i| (0..t).map(move |j| (i * 1000 + j) as f64))
        .collect();
    PatchBatch::from_parts(Array::new(&[n, t, 1], data).unwrap(), 1, (1, t), 1).unwrap()
}

fn decode(v: f64) -> (usize, usize) {
    let v = v as usize;
    (v / 1000, v % 1000)
}

#[test]
fn flat_index_for_three_images_mixed_four_ways() {
    assert_eq!(flat_mix_index(3, 4), vec![0, 5, 10, 3, 4, 9, 2, 7, 8, 1, 6, 11]);
}

#[test]
fn flat_index_expands_cyclic_sources() {
    for n in 1..8 {
        for m in 1..=n {
            let q = flat_mix_index(n, m);
            for i in 0..n {
                for g in 0..m {
                    assert_eq!(q[i * m + g], mix_source(i, g, n) * m + g);
                }
            }
        }
    }
}

#[test]
fn single_image_mix_is_identity() {
    let plan = plan_mix(MixConfig::new(4, 1, 6).unwrap(), Permutation::identity(6)).unwrap();
    assert_eq!(plan.q, vec![0, 1, 2, 3]);
    for i in 0..4 {
        assert_eq!(plan.y_mto[i], vec![i]);
        assert_eq!(plan.y_mtm[i], vec![i]);
        assert_eq!(plan.w_mtm[i], vec![1.0]);
    }
    let pb = labelled(4, 6);
    assert_eq!(apply_mix(&pb, &plan).unwrap().patches, pb);
}

#[test]
fn mix_to_mix_window_for_nine_images() {
    let rows = mix_to_mix_targets(9, 3);
    assert_eq!(rows[0], vec![7, 8, 0, 1, 2]);
    assert_eq!(rows[1], vec![8, 0, 1, 2, 3]);
}

#[test]
fn weight_rows() {
    let w3 = mix_weight_row(3);
    let want = [1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0];
    for (a, b) in w3.iter().zip(want) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(mix_weight_row(1), vec![1.0]);
    assert_eq!(mix_weight_row(4), vec![0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25]);
    for m in 1..10 {
        let row = mix_weight_row(m);
        assert!((row.iter().sum::<f64>() - m as f64).abs() < 1e-12);
        assert!(row.iter().all(|&w| w > 0.0 && w <= 1.0));
        let rev: Vec<f64> = row.iter().rev().copied().collect();
        assert_eq!(row, rev);
    }
    let cfg = MixConfig::new(5, 2, 4).unwrap();
    assert!(mix_weights(&cfg).iter().all(|r| *r == mix_weight_row(2)));
}

#[test]
fn three_way_mix_with_identity_permutation() {
    // mixed image 0 = (p00, p11, p22)
    let pb = labelled(3, 3);
    let plan = plan_mix(MixConfig::new(3, 3, 3).unwrap(), Permutation::identity(3)).unwrap();
    let mixed = apply_mix(&pb, &plan).unwrap().patches;
    let row: Vec<_> = (0..3).map(|j| decode(mixed.patch(0, j)[0])).collect();
    assert_eq!(row, vec![(0, 0), (1, 1), (2, 2)]);
}

#[test]
fn two_way_mix_of_four_patches() {
    // groups of image 0 are {p00, p01} and {p02, p03}; mixed image 0 = G00 + G11
    let pb = labelled(2, 4);
    let cfg = MixConfig::new(2, 2, 4).unwrap();
    let perm = Permutation::identity(4);
    let mixed = naive_mix_oracle(&pb, cfg, &perm).unwrap().patches;
    let row: Vec<_> = (0..4).map(|j| decode(mixed.patch(0, j)[0])).collect();
    assert_eq!(row, vec![(0, 0), (0, 1), (1, 2), (1, 3)]);
    let plan = plan_mix(cfg, perm).unwrap();
    assert_eq!(apply_mix(&pb, &plan).unwrap().patches, mixed);
}

#[test]
fn oracle_single_image_mix_is_identity() {
    let pb = labelled(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perm = Permutation::sample(5, &mut rng);
    let out = naive_mix_oracle(&pb, MixConfig::new(3, 1, 5).unwrap(), &perm).unwrap();
    assert_eq!(out.patches, pb);
}

#[test]
fn rejects_more_sources_than_images() {
    assert!(MixConfig::new(3, 4, 12).is_err());
    assert!(MixConfig::new(3, 0, 12).is_err());
    assert!(MixConfig::new(3, 3, 2).is_err());
    let cfg = MixConfig {
        mix: 4,
        batch: 3,
        tokens: 12,
    };
    assert!(plan_mix(cfg, Permutation::identity(12)).is_err());
}

#[test]
fn shape_mismatch_is_rejected() {
    let plan = plan_mix(MixConfig::new(3, 2, 4).unwrap(), Permutation::identity(4)).unwrap();
    assert!(apply_mix(&labelled(2, 4), &plan).is_err());
    assert!(apply_mix(&labelled(3, 5), &plan).is_err());
    assert!(plan_mix(MixConfig::new(3, 2, 4).unwrap(), Permutation::identity(5)).is_err());
    let cfg = MixConfig::new(3, 2, 4).unwrap();
    assert!(naive_mix_oracle(&labelled(3, 5), cfg, &Permutation::identity(4)).is_err());
}

#[test]
fn leftover_patches_go_to_leading_groups() {
    assert_eq!(group_bounds(10, 3), vec![0, 4, 7, 10]);
    assert_eq!(group_bounds(9, 3), vec![0, 3, 6, 9]);
    assert_eq!(group_bounds(5, 5), vec![0, 1, 2, 3, 4, 5]);
}

#[test]
fn flat_and_naive_agree_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..500 {
        let n = rng.gen_range(1..7);
        let m = rng.gen_range(1..=n);
        let t = rng.gen_range(m..20);
        let cfg = MixConfig::new(n, m, t).unwrap();
        let perm = Permutation::sample(t, &mut rng);
        let data = (0..n * t * 3).map(|_| rng.gen::<f64>()).collect();
        let pb = PatchBatch::from_parts(Array::new(&[n, t, 3], data).unwrap(), 1, (1, t), 3)
            .unwrap();
        let plan = plan_mix(cfg, perm.clone()).unwrap();
        let fast = apply_mix(&pb, &plan).unwrap();
        let slow = naive_mix_oracle(&pb, cfg, &perm).unwrap();
        assert_eq!(fast, slow, "N={n} M={m} T={t} perm={:?}", perm.forward());
    }
}

#[test]
fn duplicate_windows_are_kept_verbatim() {
    // N = 3 <= 2M - 2 = 2 for M = 2; the window for image 0 is (2, 0, 1)
    let plan = plan_mix(MixConfig::new(2, 2, 4).unwrap(), Permutation::identity(4)).unwrap();
    assert_eq!(plan.y_mtm[0], vec![1, 0, 1]);
}

#[test]
fn corrupted_index_is_rejected_or_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pb = labelled(4, 8);
    let cfg = MixConfig::new(4, 2, 8).unwrap();
    let perm = Permutation::sample(8, &mut rng);
    let mut plan = plan_mix(cfg, perm.clone()).unwrap();
    plan.q[1] = (plan.q[1] + 2) % cfg.groups();
    let mixed = apply_mix(&pb, &plan).unwrap();
    assert_ne!(mixed.patches, naive_mix_oracle(&pb, cfg, &perm).unwrap().patches);
    plan.q.pop();
    assert!(apply_mix(&pb, &plan).is_err());
}

#[test]
fn plan_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let plan = plan_mix(MixConfig::new(5, 3, 10).unwrap(), Permutation::sample(10, &mut rng))
        .unwrap();
    let text = write_plan(&plan);
    assert!(text.starts_with("patchmix-plan 1\nN 5\nM 3\nT 10\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("source_map ")).count(), 5);
    assert_eq!(parse_plan(&text).unwrap(), plan);
}

#[test]
fn plan_text_golden() {
    let plan = plan_mix(
        MixConfig::new(3, 2, 4).unwrap(),
        Permutation::from_forward(vec![2, 0, 3, 1]).unwrap(),
    )
    .unwrap();
    let want = "patchmix-plan 1
N 3
M 2
T 4
perm 2 0 3 1
inverse 1 3 0 2
group_bounds 0 2 4
q 0 3 2 5 4 1
source_map 0 1 0 1
source_map 1 2 1 2
source_map 2 0 2 0
y_mto 0 1
y_mto 1 2
y_mto 2 0
y_mtm 2 0 1
y_mtm 0 1 2
y_mtm 1 2 0
w_mtm 0.5 1 0.5
w_mtm 0.5 1 0.5
w_mtm 0.5 1 0.5
";
    assert_eq!(write_plan(&plan), want);
}

#[test]
fn parse_rejects_garbage() {
    assert!(parse_plan("nope").is_err());
    assert!(parse_plan("patchmix-plan 1\nN 3\n").is_err());
    assert!(parse_plan("patchmix-plan 1\nN x\n").is_err());
    assert!(parse_plan("patchmix-plan 1\nbogus 1\n").is_err());
}

fn arb_instance() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..7)
        .prop_flat_map(|n| (Just(n), 1..=n))
        .prop_flat_map(|(n, m)| (Just(n), Just(m), m..24, any::<u64>()))
}

proptest! {
    #[test]
    fn q_is_a_bijection(n in 1usize..12, m in 1usize..12) {
        let mut q = flat_mix_index(n, m);
        q.sort_unstable();
        prop_assert_eq!(q, (0..n * m).collect::<Vec<_>>());
    }

    #[test]
    fn mixing_conserves_and_keeps_positions((n, m, t, seed) in arb_instance()) {
        let pb = labelled(n, t);
        let perm = Permutation::sample(t, &mut ChaCha8Rng::seed_from_u64(seed));
        let plan = plan_mix(MixConfig::new(n, m, t).unwrap(), perm).unwrap();
        let mixed = apply_mix(&pb, &plan).unwrap().patches;
        let mut seen = vec![false; n * t];
        for i in 0..n {
            for j in 0..t {
                let (src, pos) = decode(mixed.patch(i, j)[0]);
                prop_assert_eq!(pos, j);
                prop_assert_eq!(src, plan.source(i, j));
                prop_assert!(!std::mem::replace(&mut seen[src * t + pos], true));
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn targets_follow_the_cyclic_rule((n, m, t, seed) in arb_instance()) {
        let perm = Permutation::sample(t, &mut ChaCha8Rng::seed_from_u64(seed));
        let plan = plan_mix(MixConfig::new(n, m, t).unwrap(), perm).unwrap();
        let mut contributions = vec![Vec::new(); n];
        for (i, row) in plan.y_mto.iter().enumerate() {
            prop_assert_eq!(row.len(), m);
            let mut distinct = row.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), m);
            for (g, &src) in row.iter().enumerate() {
                prop_assert_eq!(src, (i + g) % n);
                contributions[src].push(i);
            }
        }
        for (src, mixed) in contributions.iter_mut().enumerate() {
            mixed.sort_unstable();
            let mut want: Vec<usize> = (0..m).map(|g| (src + n - g) % n).collect();
            want.sort_unstable();
            prop_assert_eq!(&*mixed, &want);
        }
        for (i, row) in plan.y_mtm.iter().enumerate() {
            prop_assert_eq!(row[m - 1], i);
            for (j, &v) in row.iter().enumerate() {
                prop_assert_eq!((v + n * 2 * m - i) % n, (j + n * 2 * m + 1 - m) % n);
            }
        }
    }
}
