mod common;

use common::metric::*;
use motext::eval::{
    ap_ndcg, eval_m2m, greedy_farthest, protocol_all, protocol_all_threshold, protocol_dissimilar,
    protocol_small_batches, rank_all, recall_metrics, select_dissimilar,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recall_matches_counting_oracle_on_random_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ranks: Vec<usize> = (0..1000).map(|_| rng.random_range(1..=40)).collect();
    let got = recall_metrics(&ranks).unwrap();
    let (rec, med) = recall_oracle(&ranks);
    for k in 0..5 {
        assert!((got.recall[k] - rec[k]).abs() < 1e-9);
    }
    assert_eq!(got.medr, med);
    let ones = recall_metrics(&[1; 17]).unwrap();
    assert_eq!((ones.recall, ones.medr), ([100.0; 5], 1.0));
}

#[test]
fn rank_all_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, db) = (feats(&mut rng, 8, 16), feats(&mut rng, 20, 16));
    let lists = rank_all(&q, &db).unwrap();
    for (i, l) in lists.iter().enumerate() {
        let scores: Vec<f64> = db.iter().map(|d| cos(&q[i], d)).collect();
        let mut idx: Vec<usize> = (0..db.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(l.candidates, idx);
        assert!(l.scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn rank_all_breaks_ties_by_index_and_finds_exact_copies() {
    let db = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
    let lists = rank_all(&[vec![3.0, 0.0]], &db).unwrap();
    assert_eq!(lists[0].candidates, vec![1, 2, 3, 0]);
}

#[test]
fn protocol_all_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(2..=8);
        let (t, m) = (feats(&mut rng, n, d), feats(&mut rng, n, d));
        let (a, b) = oracle_ranks(&t, &m, |_, _| false);
        assert_report(&protocol_all(&t, &m).unwrap(), &a, &b);
    }
}

#[test]
fn perfect_and_adversarial_embeddings() {
    let n = 12;
    let eye: Vec<Vec<f32>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let r = protocol_all(&eye, &eye).unwrap();
    assert_eq!((r.t2m.medr, r.m2t.medr, r.rsum), (1.0, 1.0, 1000.0));
    // Each motion points away from its own caption.
    let m: Vec<Vec<f32>> = eye.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let r = protocol_all(&eye, &m).unwrap();
    assert_eq!(r.t2m.recall, [0.0; 5]);
    assert_eq!(r.t2m.medr, n as f64);
}

#[test]
fn random_embeddings_give_chance_recall() {
    let seeds = 200;
    let mut values = Vec::new();
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let (t, m) = (feats(&mut rng, 100, 16), feats(&mut rng, 100, 16));
        values.push(protocol_all(&t, &m).unwrap().t2m.recall[0]);
    }
    let mean = values.iter().sum::<f64>() / seeds as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
    // Chance level is 1% per evaluation; sd is the spread of one evaluation.
    assert!((mean - 1.0).abs() <= sd, "mean R@1 {mean}, sd {sd}");
    assert!((0.5..2.0).contains(&sd), "sd {sd}");
}

#[test]
fn threshold_zero_makes_everything_correct() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, m) = (feats(&mut rng, 10, 4), feats(&mut rng, 10, 4));
    let sim: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let r = protocol_all_threshold(&t, &m, &sim, 0.0).unwrap();
    assert_eq!(r.t2m.recall, [100.0; 5]);
    assert_eq!(r.m2t.recall, [100.0; 5]);
}

#[test]
fn inactive_threshold_equals_protocol_all_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(2..=40);
        let (t, m) = (feats(&mut rng, n, 6), feats(&mut rng, n, 6));
        let sim: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { rng.random_range(0.0..0.9) }).collect();
        let a = protocol_all(&t, &m).unwrap();
        let b = protocol_all_threshold(&t, &m, &sim, 0.95).unwrap();
        for (x, y) in [(&a.t2m, &b.t2m), (&a.m2t, &b.m2t)] {
            assert_eq!(x.recall.map(f64::to_bits), y.recall.map(f64::to_bits));
            assert_eq!(x.medr.to_bits(), y.medr.to_bits());
        }
        assert_eq!(a.rsum.to_bits(), b.rsum.to_bits());
    }
}

#[test]
fn duplicate_captions_match_relaxed_rank_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 24;
    // Captions drawn from 8 templates; equal templates are similarity 1.
    let template: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let sim: Vec<f64> = (0..n * n)
        .map(|k| if template[k / n] == template[k % n] { 1.0 } else { rng.random_range(0.0..0.5) })
        .collect();
    let (t, m) = (feats(&mut rng, n, 5), feats(&mut rng, n, 5));
    let r = protocol_all_threshold(&t, &m, &sim, 0.95).unwrap();
    let (a, b) = oracle_ranks(&t, &m, |q, c| sim[q * n + c] >= 0.95);
    assert_report(&r, &a, &b);
}

#[test]
fn dissimilar_selection_matches_exhaustive_max_min() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut greedy_optimal = 0;
    let mut cases = 0;
    for n in 4..=12 {
        for k in 2..=4 {
            for _ in 0..10 {
                let sim = random_sim(&mut rng, n);
                let want = brute_force_max_min(&sim, n, k);
                let sel = select_dissimilar(&sim, n, k).unwrap();
                assert_eq!(sel.len(), k);
                assert!((min_dist(&sel, &sim, n) - want).abs() < 1e-12, "n={n} k={k}");
                cases += 1;
                if (min_dist(&greedy_farthest(&sim, n, k), &sim, n) - want).abs() < 1e-12 {
                    greedy_optimal += 1;
                }
            }
        }
    }
    println!("greedy farthest-point alone was optimal in {greedy_optimal} of {cases} cases");
}

#[test]
fn dissimilar_with_full_subset_equals_protocol_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 15;
    let (t, m) = (feats(&mut rng, n, 4), feats(&mut rng, n, 4));
    let sim = random_sim(&mut rng, n);
    let (r, sel) = protocol_dissimilar(&t, &m, &sim, n).unwrap();
    assert_eq!(sel, (0..n).collect::<Vec<_>>());
    let a = protocol_all(&t, &m).unwrap();
    assert_eq!((r.t2m.recall, r.m2t.recall, r.rsum), (a.t2m.recall, a.m2t.recall, a.rsum));
    assert!(protocol_dissimilar(&t, &m, &sim, n + 1).is_err());
}

#[test]
fn single_small_batch_equals_protocol_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, m) = (feats(&mut rng, 32, 8), feats(&mut rng, 32, 8));
    let a = protocol_all(&t, &m).unwrap();
    let b = protocol_small_batches(&t, &m, 32, 3, 4).unwrap();
    for k in 0..5 {
        assert!((a.t2m.recall[k] - b.t2m.recall[k]).abs() < 1e-9);
        assert!((a.m2t.recall[k] - b.m2t.recall[k]).abs() < 1e-9);
    }
    assert!((a.t2m.medr - b.t2m.medr).abs() < 1e-9);
}

#[test]
fn small_batches_are_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, m) = (feats(&mut rng, 100, 8), feats(&mut rng, 100, 8));
    let a = protocol_small_batches(&t, &m, 32, 5, 10).unwrap();
    let b = protocol_small_batches(&t, &m, 32, 5, 10).unwrap();
    assert_eq!((a.t2m.recall, a.m2t.medr), (b.t2m.recall, b.m2t.medr));
    let eye: Vec<Vec<f32>> = (0..40).map(|i| (0..40).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    assert_eq!(protocol_small_batches(&eye, &eye, 32, 0, 3).unwrap().t2m.medr, 1.0);
    assert!(protocol_small_batches(&t[..20], &m[..20], 32, 0, 1).is_err());
}

#[test]
fn m2m_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = feats(&mut rng, 30, 6);
        let mut labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        labels.shuffle(&mut rng);
        let names: Vec<Option<String>> = labels.iter().map(|l| Some(format!("c{l}"))).collect();
        let (map, ndcg) = eval_m2m(&m, &names).unwrap();
        let (wm, wn) = m2m_oracle(&m, &labels);
        assert!((map - wm).abs() < 1e-9 && (ndcg - wn).abs() < 1e-9);
    }
}

#[test]
fn ap_ndcg_hand_values() {
    assert_eq!(ap_ndcg(&[true, true, true]), Some((1.0, 1.0)));
    let (ap, nd) = ap_ndcg(&[false, true, false]).unwrap();
    assert!((ap - 0.5).abs() < 1e-12);
    assert!((nd - 1.0 / 3f64.log2()).abs() < 1e-12 && (nd - 0.6309).abs() < 1e-4);
    assert_eq!(ap_ndcg(&[false, false]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_never_lowers_recall(seed in 0u64..10_000, n in 2usize..30, theta in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, m) = (feats(&mut rng, n, 4), feats(&mut rng, n, 4));
        let sim: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = protocol_all(&t, &m).unwrap();
        let b = protocol_all_threshold(&t, &m, &sim, theta).unwrap();
        for k in 0..5 {
            prop_assert!(b.t2m.recall[k] >= a.t2m.recall[k]);
            prop_assert!(b.m2t.recall[k] >= a.m2t.recall[k]);
        }
        prop_assert!(b.t2m.medr <= a.t2m.medr);
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..50, 1..100)) {
        let r = recall_metrics(&ranks).unwrap();
        prop_assert!(r.recall.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.recall.iter().all(|&v| (0.0..=100.0).contains(&v)));
    }
}
