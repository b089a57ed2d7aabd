//! Brute-force retrieval metric oracles.

use motext::eval::ProtocolReport;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn feats(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let n = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

/// 1-based rank of `target` among `scores` (higher first, ties by index).
pub fn rank_oracle(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

pub fn recall_oracle(ranks: &[usize]) -> ([f64; 5], f64) {
    let ks = [1, 2, 3, 5, 10];
    let mut r = [0.0; 5];
    for (i, k) in ks.iter().enumerate() {
        let mut hits = 0;
        for &x in ranks {
            if x <= *k {
                hits += 1;
            }
        }
        r[i] = hits as f64 * 100.0 / ranks.len() as f64;
    }
    let mut s = ranks.to_vec();
    s.sort();
    let n = s.len();
    let med = if n.is_multiple_of(2) { (s[n / 2 - 1] as f64 + s[n / 2] as f64) / 2.0 } else { s[n / 2] as f64 };
    (r, med)
}

pub fn assert_report(r: &ProtocolReport, t2m: &[usize], m2t: &[usize]) {
    for (got, ranks) in [(&r.t2m, t2m), (&r.m2t, m2t)] {
        let (rec, med) = recall_oracle(ranks);
        for k in 0..5 {
            assert!((got.recall[k] - rec[k]).abs() < 1e-9);
        }
        assert!((got.medr - med).abs() < 1e-9);
    }
    let rsum: f64 = r.t2m.recall.iter().chain(&r.m2t.recall).sum();
    assert!((r.rsum - rsum).abs() < 1e-9);
}

pub fn oracle_ranks(t: &[Vec<f32>], m: &[Vec<f32>], ok: impl Fn(usize, usize) -> bool) -> (Vec<usize>, Vec<usize>) {
    let n = t.len();
    let best = |scores: &[f64], q: usize| (0..n).filter(|&c| c == q || ok(q, c)).map(|c| rank_oracle(scores, c)).min().unwrap();
    let t2m = (0..n).map(|i| best(&m.iter().map(|x| cos(&t[i], x)).collect::<Vec<_>>(), i)).collect();
    let m2t = (0..n).map(|i| best(&t.iter().map(|x| cos(&m[i], x)).collect::<Vec<_>>(), i)).collect();
    (t2m, m2t)
}

pub fn min_dist(sel: &[usize], sim: &[f64], n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..sel.len() {
        for b in a + 1..sel.len() {
            best = best.min(1.0 - sim[sel[a] * n + sel[b]]);
        }
    }
    best
}

pub fn brute_force_max_min(sim: &[f64], n: usize, k: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            let sel: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            best = best.max(min_dist(&sel, sim, n));
        }
    }
    best
}

pub fn random_sim(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let f = feats(rng, n, 3);
    (0..n * n).map(|k| if k / n == k % n { 1.0 } else { cos(&f[k / n], &f[k % n]) }).collect()
}

pub fn m2m_oracle(m: &[Vec<f32>], labels: &[usize]) -> (f64, f64) {
    let n = m.len();
    let (mut map, mut ndcg) = (0.0, 0.0);
    for q in 0..n {
        let scores: Vec<f64> = m.iter().map(|x| cos(&m[q], x)).collect();
        // Rank among the other items only.
        let rank = |c: usize| rank_oracle(&scores, c) - usize::from(rank_oracle(&scores, q) < rank_oracle(&scores, c));
        let relevant: Vec<usize> = (0..n).filter(|&c| c != q && labels[c] == labels[q]).collect();
        let ranks: Vec<usize> = relevant.iter().map(|&c| rank(c)).collect();
        let ap: f64 = ranks.iter().map(|&r| ranks.iter().filter(|&&s| s <= r).count() as f64 / r as f64).sum::<f64>()
            / ranks.len() as f64;
        let dcg: f64 = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).log2()).sum();
        let ideal: f64 = (1..=ranks.len()).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        map += ap;
        ndcg += dcg / ideal;
    }
    (map / n as f64, ndcg / n as f64)
}
