use std::collections::BTreeSet;

use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
use proptest::strategy::Strategy as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitsteer_core::sae::sparsify;
use vitsteer_core::steering::{
    amplify, global_vs_per_class_overlap, jaccard, latent_overlap, select_latents, ActivationStats, LatentSet,
    SteerSpec, Strategy,
};
use vitsteer_core::tensor::Tensor;

fn spec(strategy: Strategy, k_steer: usize, class: Option<usize>, seed: Option<u64>) -> SteerSpec {
    SteerSpec { strategy, alpha: 1.0, k_steer, class, seed }
}

/// 3 classes × 5 samples of 8-latent codes.
fn fixture() -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..5 {
            for i in 0..8 {
                let bias = if i % 3 == c { 0.8 } else { 0.2 };
                data.push(if rng.random::<f32>() < bias { rng.random_range(0.1..2.0) } else { 0.0 });
            }
            labels.push(c);
        }
    }
    (Tensor::new(&[15, 8], data).unwrap(), labels)
}

#[test]
fn counts_match_brute_force() {
    let (codes, labels) = fixture();
    let stats = ActivationStats::from_codes(&codes, &labels, 3).unwrap();
    for c in 0..3 {
        for i in 0..8 {
            let hits = (0..15).filter(|&r| labels[r] == c && codes.at(&[r, i]) > 0.0).count();
            assert_eq!(stats.class_freq(c)[i], hits as f64 / 5.0);
        }
    }
    let global = stats.global_freq();
    let per = stats.per_class_freq();
    for i in 0..8 {
        let weighted: f64 = (0..3).map(|c| per[c][i] * 5.0).sum::<f64>() / 15.0;
        assert!((global[i] - weighted).abs() < 1e-6);
    }
}

#[test]
fn single_latent_everywhere() {
    let mut codes = Tensor::<f32>::zeros(&[4, 5]).unwrap();
    for r in 0..4 {
        codes.data_mut()[r * 5] = 1.0;
    }
    let stats = ActivationStats::from_codes(&codes, &[0, 1, 1, 0], 2).unwrap();
    for c in 0..2 {
        assert_eq!(stats.class_freq(c), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn global_versus_per_class_overlap_matches_brute_force() {
    let (codes, labels) = fixture();
    let stats = ActivationStats::from_codes(&codes, &labels, 3).unwrap();
    let k = 3;
    let top = |freq: Vec<f64>| -> BTreeSet<usize> {
        let mut idx: Vec<usize> = (0..freq.len()).collect();
        idx.sort_by(|&a, &b| freq[b].partial_cmp(&freq[a]).unwrap().then(a.cmp(&b)));
        idx[..k].iter().copied().collect()
    };
    let g = top(stats.global_freq());
    let mut total = 0.0;
    for c in 0..3 {
        let p = top(stats.class_freq(c));
        total += p.intersection(&g).count() as f64 / p.union(&g).count() as f64;
        let set = select_latents(&stats, &spec(Strategy::PerClassFrequent, k, Some(c), None)).unwrap();
        assert_eq!(set.indices().iter().copied().collect::<BTreeSet<_>>(), p);
    }
    let got = global_vs_per_class_overlap(&stats, k).unwrap();
    assert!((got - total / 3.0).abs() < 1e-12);
}

#[test]
fn random_selection_is_seeded_and_uniform() {
    let stats = ActivationStats { counts: vec![vec![0; 40]], class_samples: vec![1] };
    let a = select_latents(&stats, &spec(Strategy::Random, 5, None, Some(3))).unwrap();
    let b = select_latents(&stats, &spec(Strategy::Random, 5, None, Some(3))).unwrap();
    assert_eq!(a, b);
    assert!(select_latents(&stats, &spec(Strategy::Random, 5, None, None)).is_err());

    let draws = 4000;
    let mut hits = vec![0usize; 40];
    for seed in 0..draws {
        for &i in select_latents(&stats, &spec(Strategy::Random, 5, None, Some(seed))).unwrap().indices() {
            hits[i] += 1;
        }
    }
    let p = 5.0 / 40.0;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sd + 1.0, "latent {i}: {h}");
    }
}

#[test]
fn k_steer_bounds() {
    let stats = ActivationStats { counts: vec![vec![1, 2, 3]], class_samples: vec![3] };
    assert!(select_latents(&stats, &spec(Strategy::GlobalFrequent, 0, None, None)).is_err());
    assert!(select_latents(&stats, &spec(Strategy::GlobalFrequent, 4, None, None)).is_err());
    assert_eq!(select_latents(&stats, &spec(Strategy::GlobalFrequent, 2, None, None)).unwrap().indices(), &[2, 1]);
}

#[test]
fn overlap_identity_and_disjoint() {
    let stats = ActivationStats {
        counts: vec![vec![5, 5, 0, 0], vec![5, 5, 0, 0], vec![0, 0, 5, 5]],
        class_samples: vec![5, 5, 5],
    };
    assert_eq!(latent_overlap(&stats, 0, Some(1), 2).unwrap(), 1.0);
    assert_eq!(latent_overlap(&stats, 0, Some(2), 2).unwrap(), 0.0);
}

#[test]
fn negative_alpha_inside_support_keeps_support() {
    let z = sparsify(&[3.0f64, 0.0, 2.0, 1.5, 0.0], 3).unwrap();
    let set = LatentSet::new(vec![0, 2], 5).unwrap();
    let out = amplify(&z, &set, -1.0, 3).unwrap();
    assert_eq!(out, vec![2.0, 0.0, 1.0, 1.5, 0.0]);
}

fn code(n: usize, k: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| sparsify(&v, k).unwrap())
}

fn latent_set(n: usize) -> impl proptest::strategy::Strategy<Value = LatentSet> {
    prop::collection::btree_set(0..n, 0..n).prop_map(move |s| LatentSet::new(s.into_iter().collect(), n).unwrap())
}

proptest! {
    #[test]
    fn zero_alpha_is_bitwise_identity(z in code(24, 6), set in latent_set(24)) {
        let out = amplify(&z, &set, 0.0, 6).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&out), bits(&z));
    }

    #[test]
    fn amplified_codes_stay_sparse(z in code(24, 6), set in latent_set(24), alpha in -4.0f64..4.0) {
        let out = amplify(&z, &set, alpha, 6).unwrap();
        prop_assert!(out.iter().filter(|v| **v != 0.0).count() <= 6);
    }

    #[test]
    fn recruitment_is_monotone(z in code(24, 6), set in latent_set(24), a0 in 0.01f64..3.0, extra in 0.0f64..3.0) {
        let lo = amplify(&z, &set, a0, 6).unwrap();
        let hi = amplify(&z, &set, a0 + extra, 6).unwrap();
        for &j in set.indices() {
            if lo[j] > 0.0 {
                prop_assert!(hi[j] > 0.0, "latent {} lost at larger alpha", j);
            }
        }
    }

    #[test]
    fn jaccard_symmetric_and_one_iff_equal(a in latent_set(16), b in latent_set(16)) {
        let ab = jaccard(&a, &b);
        prop_assert_eq!(ab, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        let same = a.indices().iter().collect::<BTreeSet<_>>() == b.indices().iter().collect::<BTreeSet<_>>();
        prop_assert_eq!(ab == 1.0, same);
    }
}
