//! Exact cosine ranking, recall / median-rank / mAP / nDCG metrics and the
//! four text-motion evaluation protocols.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::model::RetrievalModel;
use crate::text::{Teacher, TfidfTeacher};

pub const RECALL_KS: [usize; 5] = [1, 2, 3, 5, 10];

/// Candidates for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// 1-based position of `candidate`.
    pub fn rank_of(&self, candidate: usize) -> Option<usize> {
        self.candidates.iter().position(|&c| c == candidate).map(|p| p + 1)
    }

    /// 1-based position of the first candidate satisfying `ok`.
    pub fn first_rank(&self, mut ok: impl FnMut(usize) -> bool) -> Option<usize> {
        self.candidates.iter().position(|&c| ok(c)).map(|p| p + 1)
    }
}

fn unit_rows(x: &[Vec<f32>], what: &str) -> Result<Vec<Vec<f64>>> {
    x.iter()
        .enumerate()
        .map(|(i, row)| {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("{what} row {i} has zero or non-finite norm")));
            }
            Ok(row.iter().map(|&v| v as f64 / n).collect())
        })
        .collect()
}

/// Row-major `[Q, M]` cosine similarities in f64.
pub fn cosine_scores(queries: &[Vec<f32>], db: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let q = unit_rows(queries, "query")?;
    let d = unit_rows(db, "database")?;
    if let (Some(a), Some(b)) = (q.first(), d.first()) {
        if a.len() != b.len() || q.iter().chain(&d).any(|r| r.len() != a.len()) {
            return Err(Error::Invalid("feature dimensions differ".into()));
        }
    }
    Ok(q.iter()
        .map(|qr| d.iter().map(|dr| qr.iter().zip(dr).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

/// Sorts candidate indices by descending score, ties by ascending index.
pub fn rank_scores(query: usize, scores: &[f64]) -> RankedList {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    RankedList { query, scores: idx.iter().map(|&i| scores[i]).collect(), candidates: idx }
}

/// Full exact ranking of `db` for every query by cosine similarity.
pub fn rank_all(queries: &[Vec<f32>], db: &[Vec<f32>]) -> Result<Vec<RankedList>> {
    Ok(cosine_scores(queries, db)?
        .iter()
        .enumerate()
        .map(|(q, s)| rank_scores(q, s))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallMetrics {
    /// R@1, R@2, R@3, R@5, R@10 in percent.
    pub recall: [f64; 5],
    pub medr: f64,
}

impl RecallMetrics {
    pub fn sum(&self) -> f64 {
        self.recall.iter().sum()
    }
}

pub fn recall_metrics(ranks: &[usize]) -> Result<RecallMetrics> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Invalid("ranks are 1-based".into()));
    }
    let q = ranks.len() as f64;
    let recall = RECALL_KS.map(|k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / q);
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let medr = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(RecallMetrics { recall, medr })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    T2m,
    M2t,
    M2m,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    All,
    AllThreshold,
    Dissimilar,
    SmallBatches,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::All => "all",
            Protocol::AllThreshold => "all_threshold",
            Protocol::Dissimilar => "dissimilar",
            Protocol::SmallBatches => "small_batches",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Protocol::All,
            "all_threshold" => Protocol::AllThreshold,
            "dissimilar" => Protocol::Dissimilar,
            "small_batches" => Protocol::SmallBatches,
            _ => return Err(Error::Config(format!("unknown protocol {s:?}"))),
        })
    }
}

/// Metrics for one direction under one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub protocol: Protocol,
    pub recall: [f64; 5],
    pub medr: f64,
    pub rsum: f64,
    pub map: Option<f64>,
    pub ndcg: Option<f64>,
}

impl EvalReport {
    fn from_metrics(direction: Direction, protocol: Protocol, m: RecallMetrics) -> Self {
        Self { direction, protocol, recall: m.recall, medr: m.medr, rsum: m.sum(), map: None, ndcg: None }
    }
}

/// Both retrieval directions for one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub t2m: EvalReport,
    pub m2t: EvalReport,
    /// Sum of the ten recalls over both directions.
    pub rsum: f64,
}

impl ProtocolReport {
    fn new(protocol: Protocol, t2m: RecallMetrics, m2t: RecallMetrics) -> Self {
        Self {
            protocol,
            rsum: t2m.sum() + m2t.sum(),
            t2m: EvalReport::from_metrics(Direction::T2m, protocol, t2m),
            m2t: EvalReport::from_metrics(Direction::M2t, protocol, m2t),
        }
    }
}

fn check_aligned(t: &[Vec<f32>], m: &[Vec<f32>]) -> Result<()> {
    if t.len() != m.len() {
        return Err(Error::Invalid(format!("{} texts but {} motions", t.len(), m.len())));
    }
    if t.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    Ok(())
}

/// Ranks of the true counterpart, text `i` paired with motion `i`, with
/// `correct(query, candidate)` widening what counts as a hit.
fn relaxed_ranks(
    t: &[Vec<f32>],
    m: &[Vec<f32>],
    correct: impl Fn(usize, usize) -> bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_aligned(t, m)?;
    let scores = cosine_scores(t, m)?;
    let t2m = scores
        .iter()
        .enumerate()
        .map(|(i, s)| rank_scores(i, s).first_rank(|j| j == i || correct(i, j)).unwrap())
        .collect();
    let n = t.len();
    let m2t = (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..n).map(|j| scores[j][i]).collect();
            rank_scores(i, &col).first_rank(|j| j == i || correct(i, j)).unwrap()
        })
        .collect();
    Ok((t2m, m2t))
}

/// Every text and every motion is both a query and part of the gallery.
pub fn protocol_all(t: &[Vec<f32>], m: &[Vec<f32>]) -> Result<ProtocolReport> {
    let (a, b) = relaxed_ranks(t, m, |_, _| false)?;
    Ok(ProtocolReport::new(Protocol::All, recall_metrics(&a)?, recall_metrics(&b)?))
}

/// A retrieved item also counts as correct when its caption is at least
/// `theta` similar to the query's caption under the teacher. Applied to both
/// directions. `text_sim` is row-major `[N, N]`.
pub fn protocol_all_threshold(t: &[Vec<f32>], m: &[Vec<f32>], text_sim: &[f64], theta: f64) -> Result<ProtocolReport> {
    let n = t.len();
    if text_sim.len() != n * n {
        return Err(Error::Invalid("text similarity matrix has the wrong size".into()));
    }
    // theta = 0 is allowed as the degenerate case where everything counts.
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Invalid(format!("threshold {theta} outside [0, 1]")));
    }
    let (a, b) = relaxed_ranks(t, m, |i, j| text_sim[i * n + j] >= theta)?;
    Ok(ProtocolReport::new(Protocol::AllThreshold, recall_metrics(&a)?, recall_metrics(&b)?))
}

/// Candidate subsets up to this count are searched exhaustively.
pub const EXHAUSTIVE_SUBSET_BUDGET: u128 = 100_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn min_pairwise_distance(sel: &[usize], sim: &[f64], n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in sel.iter().enumerate() {
        for &j in &sel[a + 1..] {
            best = best.min(1.0 - sim[i * n + j]);
        }
    }
    best
}

/// Picks `k` of the `n` captions so that the smallest pairwise teacher
/// distance `1 - sim` is as large as possible. Small instances are solved
/// exactly (ties go to the lexicographically first subset); larger ones use
/// greedy farthest-point selection seeded with the caption of lowest mean
/// similarity. Returned indices are ascending.
pub fn select_dissimilar(sim: &[f64], n: usize, k: usize) -> Result<Vec<usize>> {
    if sim.len() != n * n {
        return Err(Error::Invalid("similarity matrix has the wrong size".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot select {k} of {n} pairs")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    if k >= 2 && binomial(n, k) <= EXHAUSTIVE_SUBSET_BUDGET {
        return Ok(exhaustive_max_min(sim, n, k));
    }
    Ok(greedy_farthest(sim, n, k))
}

fn exhaustive_max_min(sim: &[f64], n: usize, k: usize) -> Vec<usize> {
    let mut sel: Vec<usize> = (0..k).collect();
    let mut best = sel.clone();
    let mut best_val = f64::NEG_INFINITY;
    loop {
        let v = min_pairwise_distance(&sel, sim, n);
        if v > best_val {
            best_val = v;
            best.clone_from(&sel);
        }
        // Next combination in lexicographic order.
        let mut i = k;
        while i > 0 && sel[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        sel[i - 1] += 1;
        for j in i..k {
            sel[j] = sel[j - 1] + 1;
        }
    }
}

/// Greedy farthest-point selection alone (see [`select_dissimilar`]).
pub fn greedy_farthest(sim: &[f64], n: usize, k: usize) -> Vec<usize> {
    let mean_sim = |i: usize| (0..n).filter(|&j| j != i).map(|j| sim[i * n + j]).sum::<f64>();
    let start = (0..n)
        .min_by(|&a, &b| mean_sim(a).total_cmp(&mean_sim(b)).then(a.cmp(&b)))
        .unwrap();
    let mut chosen = vec![false; n];
    chosen[start] = true;
    let mut min_dist: Vec<f64> = (0..n).map(|j| 1.0 - sim[start * n + j]).collect();
    let mut sel = vec![start];
    while sel.len() < k {
        let next = (0..n)
            .filter(|&j| !chosen[j])
            .max_by(|&a, &b| min_dist[a].total_cmp(&min_dist[b]).then(b.cmp(&a)))
            .unwrap();
        chosen[next] = true;
        sel.push(next);
        for j in 0..n {
            min_dist[j] = min_dist[j].min(1.0 - sim[next * n + j]);
        }
    }
    sel.sort_unstable();
    sel
}

/// `protocol_all` restricted to `k` mutually dissimilar pairs.
pub fn protocol_dissimilar(t: &[Vec<f32>], m: &[Vec<f32>], text_sim: &[f64], k: usize) -> Result<(ProtocolReport, Vec<usize>)> {
    check_aligned(t, m)?;
    let sel = select_dissimilar(text_sim, t.len(), k)?;
    let ts: Vec<Vec<f32>> = sel.iter().map(|&i| t[i].clone()).collect();
    let ms: Vec<Vec<f32>> = sel.iter().map(|&i| m[i].clone()).collect();
    let mut r = protocol_all(&ts, &ms)?;
    r.protocol = Protocol::Dissimilar;
    r.t2m.protocol = Protocol::Dissimilar;
    r.m2t.protocol = Protocol::Dissimilar;
    Ok((r, sel))
}

pub const DEFAULT_SMALL_BATCH_REPS: usize = 10;

/// Mean metrics over random batches of `batch` pairs. Each of the `reps`
/// repetitions is a fresh seeded partition with the remainder dropped.
pub fn protocol_small_batches(t: &[Vec<f32>], m: &[Vec<f32>], batch: usize, seed: u64, reps: usize) -> Result<ProtocolReport> {
    check_aligned(t, m)?;
    if batch == 0 || t.len() < batch {
        return Err(Error::Invalid(format!("{} pairs cannot fill a batch of {batch}", t.len())));
    }
    if reps == 0 {
        return Err(Error::Invalid("at least one repetition is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc_t = RecallMetrics { recall: [0.0; 5], medr: 0.0 };
    let mut acc_m = acc_t;
    let mut count = 0usize;
    let mut idx: Vec<usize> = (0..t.len()).collect();
    for _ in 0..reps {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(batch) {
            let ts: Vec<Vec<f32>> = chunk.iter().map(|&i| t[i].clone()).collect();
            let ms: Vec<Vec<f32>> = chunk.iter().map(|&i| m[i].clone()).collect();
            let (a, b) = relaxed_ranks(&ts, &ms, |_, _| false)?;
            for (acc, ranks) in [(&mut acc_t, a), (&mut acc_m, b)] {
                let r = recall_metrics(&ranks)?;
                for (x, y) in acc.recall.iter_mut().zip(r.recall) {
                    *x += y;
                }
                acc.medr += r.medr;
            }
            count += 1;
        }
    }
    for acc in [&mut acc_t, &mut acc_m] {
        acc.recall.iter_mut().for_each(|x| *x /= count as f64);
        acc.medr /= count as f64;
    }
    Ok(ProtocolReport::new(Protocol::SmallBatches, acc_t, acc_m))
}

/// Average precision and nDCG of one binary relevance list (best first).
pub fn ap_ndcg(relevant: &[bool]) -> Option<(f64, f64)> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut dcg = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..total).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Some((ap / total as f64, dcg / idcg))
}

/// Motion-to-motion retrieval with label-match relevance, the query itself
/// excluded. Returns `(mAP, nDCG)`.
pub fn eval_m2m(m: &[Vec<f32>], labels: &[Option<String>]) -> Result<(f64, f64)> {
    if m.len() != labels.len() {
        return Err(Error::Invalid(format!("{} motions but {} labels", m.len(), labels.len())));
    }
    if m.len() < 2 {
        return Err(Error::Invalid("motion-to-motion evaluation needs two motions".into()));
    }
    let labels: Vec<&str> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.as_deref().ok_or_else(|| Error::Invalid(format!("motion {i} has no label"))))
        .collect::<Result<_>>()?;
    let scores = cosine_scores(m, m)?;
    let (mut map, mut ndcg) = (0.0, 0.0);
    for (q, s) in scores.iter().enumerate() {
        let ranked = rank_scores(q, s);
        let rel: Vec<bool> = ranked
            .candidates
            .iter()
            .filter(|&&c| c != q)
            .map(|&c| labels[c] == labels[q])
            .collect();
        let (ap, nd) = ap_ndcg(&rel)
            .ok_or_else(|| Error::Invalid(format!("motion {q} has no other motion labelled {:?}", labels[q])))?;
        map += ap;
        ndcg += nd;
    }
    let n = m.len() as f64;
    Ok((map / n, ndcg / n))
}

/// Fixed-width table with one row per protocol: MedR and R@k per direction,
/// then Rsum.
pub fn format_table(reports: &[ProtocolReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} | {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} | {:>7}",
        "protocol", "t2m", "R@1", "R@2", "R@3", "R@5", "R@10", "m2t", "R@1", "R@2", "R@3", "R@5", "R@10", "Rsum"
    );
    for r in reports {
        let _ = write!(s, "{:<14} |", r.protocol.name());
        for d in [&r.t2m, &r.m2t] {
            let _ = write!(s, " {:>6.2}", d.medr);
            for v in d.recall {
                let _ = write!(s, " {v:>6.2}");
            }
            let _ = write!(s, " |");
        }
        let _ = writeln!(s, " {:>7.2}", r.rsum);
    }
    s
}

/// One JSON object per report line.
pub fn report_records(reports: &[ProtocolReport], m2m: Option<(f64, f64)>) -> String {
    let mut s = String::new();
    for r in reports {
        for d in [&r.t2m, &r.m2t] {
            s.push_str(&serde_json::to_string(d).expect("report serializes"));
            s.push('\n');
        }
    }
    if let Some((map, ndcg)) = m2m {
        let rec = EvalReport {
            direction: Direction::M2m,
            protocol: Protocol::All,
            recall: [0.0; 5],
            medr: 0.0,
            rsum: 0.0,
            map: Some(map),
            ndcg: Some(ndcg),
        };
        s.push_str(&serde_json::to_string(&rec).expect("report serializes"));
        s.push('\n');
    }
    s
}

/// Settings for [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub protocols: Vec<Protocol>,
    /// Text similarity above which another motion also counts as correct.
    pub threshold: f64,
    /// Size of the dissimilar subset.
    pub subset: usize,
    /// Batch size for the small-batches protocol.
    pub batch: usize,
    pub seed: u64,
    pub reps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::All, Protocol::AllThreshold, Protocol::Dissimilar, Protocol::SmallBatches],
            threshold: 0.95,
            subset: 100,
            batch: 32,
            seed: 0,
            reps: DEFAULT_SMALL_BATCH_REPS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<ProtocolReport>,
    /// Motion-to-motion `(mAP, nDCG)` when every pair carries a label.
    pub m2m: Option<(f64, f64)>,
    /// Pair ids picked by the dissimilar protocol.
    pub dissimilar_ids: Vec<String>,
}

/// Encodes one split (first caption per pair) and runs the requested
/// protocols. Text similarities come from `teacher`, or from TF-IDF fitted
/// on the evaluated captions.
pub fn evaluate(
    model: &RetrievalModel,
    ds: &Dataset,
    split: Split,
    teacher: Option<&Teacher>,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let pairs = ds.split(split);
    if pairs.len() < 2 {
        return Err(Error::Invalid(format!("split {split:?} has {} pairs; need at least 2", pairs.len())));
    }
    let motions = pairs.iter().map(|p| p.motion.load()).collect::<Result<Vec<_>>>()?;
    let mrefs: Vec<&MotionSequence> = motions.iter().map(|m| m.as_ref()).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.texts[0].as_str()).collect();
    let m = model.motion_features(&mrefs, 32)?;
    let t = model.text_features(&texts, 32)?;
    let needs_sim = opts.protocols.iter().any(|p| matches!(p, Protocol::AllThreshold | Protocol::Dissimilar));
    let text_sim = if needs_sim {
        match teacher {
            Some(teacher) => teacher.matrix(&texts)?,
            None => Teacher::Tfidf(TfidfTeacher::fit(texts.iter().copied())).matrix(&texts)?,
        }
    } else {
        Vec::new()
    };
    let mut reports = Vec::with_capacity(opts.protocols.len());
    let mut dissimilar_ids = Vec::new();
    for p in &opts.protocols {
        reports.push(match p {
            Protocol::All => protocol_all(&t, &m)?,
            Protocol::AllThreshold => protocol_all_threshold(&t, &m, &text_sim, opts.threshold)?,
            Protocol::Dissimilar => {
                let k = opts.subset.min(t.len());
                let (r, sel) = protocol_dissimilar(&t, &m, &text_sim, k)?;
                dissimilar_ids = sel.iter().map(|&i| pairs[i].id.clone()).collect();
                r
            }
            Protocol::SmallBatches => protocol_small_batches(&t, &m, opts.batch, opts.seed, opts.reps)?,
        });
    }
    let labels: Vec<Option<String>> = pairs.iter().map(|p| p.label.clone()).collect();
    let m2m = if labels.iter().all(Option::is_some) {
        match eval_m2m(&m, &labels) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("skipping motion-to-motion metrics: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(EvalOutcome { reports, m2m, dissimilar_ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_example() {
        let r = recall_metrics(&[1, 3, 12]).unwrap();
        assert!((r.recall[0] - 100.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[2] - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.recall[4] - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.medr, 3.0);
    }

    #[test]
    fn even_median_is_mean_of_middle() {
        assert_eq!(recall_metrics(&[1, 2, 4, 9]).unwrap().medr, 3.0);
    }

    #[test]
    fn empty_ranks_are_rejected() {
        assert!(recall_metrics(&[]).is_err());
    }

    #[test]
    fn perfect_embeddings() {
        let f: Vec<Vec<f32>> = (0..5).map(|i| (0..5).map(|j| (i == j) as u8 as f32).collect()).collect();
        let r = protocol_all(&f, &f).unwrap();
        assert_eq!(r.rsum, 1000.0);
        assert_eq!(r.t2m.medr, 1.0);
    }

    #[test]
    fn true_item_always_last() {
        // Text i is closest to every motion except its own.
        let n = 12;
        let t: Vec<Vec<f32>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f32).collect()).collect();
        let m: Vec<Vec<f32>> = (0..n).map(|i| (0..n).map(|j| if i == j { -1.0 } else { 1.0 }).collect()).collect();
        let r = protocol_all(&t, &m).unwrap();
        assert_eq!(r.t2m.recall, [0.0; 5]);
        assert_eq!(r.t2m.medr, n as f64);
    }

    #[test]
    fn single_relevant_at_rank_two() {
        let (ap, nd) = ap_ndcg(&[false, true, false]).unwrap();
        assert_eq!(ap, 0.5);
        assert!((nd - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((nd - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn all_relevant_is_one() {
        assert_eq!(ap_ndcg(&[true; 4]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn missing_label_is_an_error() {
        let f = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        assert!(eval_m2m(&f, &[Some("a".into()), None]).is_err());
    }

    #[test]
    fn two_clusters_pick_one_each() {
        // 0,1,2 similar to each other; 3,4 similar to each other.
        let n = 5;
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                sim[i * n + j] = if i == j || (i < 3) == (j < 3) { 0.9 } else { 0.05 };
            }
            sim[i * n + i] = 1.0;
        }
        let sel = select_dissimilar(&sim, n, 2).unwrap();
        assert!(sel[0] < 3 && sel[1] >= 3, "{sel:?}");
        let sel = greedy_farthest(&sim, n, 2);
        assert!(sel[0] < 3 && sel[1] >= 3, "{sel:?}");
    }

    #[test]
    fn ties_break_by_index() {
        let r = rank_scores(0, &[0.5, 0.7, 0.5, 0.7]);
        assert_eq!(r.candidates, vec![1, 3, 0, 2]);
    }
}
