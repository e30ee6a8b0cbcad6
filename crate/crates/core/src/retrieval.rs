//! Candidate ranking, R@k / MeanR and per-round evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::RetrievalModel;

pub const DEFAULT_TOP_N: usize = 10;

/// Video embeddings in the joint space, in index order, stored normalised.
#[derive(Clone, Debug)]
pub struct VideoIndex {
    ids: Vec<String>,
    unit: Vec<Vec<f64>>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("cannot index a zero or non-finite embedding"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl VideoIndex {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut unit = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if !seen.insert(id.clone()) {
                return Err(Error::invalid(format!("duplicate video id `{id}`")));
            }
            if let Some(first) = unit.first() {
                let first: &Vec<f64> = first;
                if first.len() != v.len() {
                    return Err(Error::shape("index", format!("{} vs {}", first.len(), v.len())));
                }
            }
            unit.push(normalized(&v)?);
            ids.push(id);
        }
        Ok(VideoIndex { ids, unit })
    }

    /// Embeds every sample's features with the model's current video map.
    pub fn build(model: &RetrievalModel, samples: &[Sample]) -> Result<Self> {
        let entries = samples
            .iter()
            .map(|s| Ok((s.id.clone(), model.embed_video(&s.features)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine similarity of `query` with every indexed video.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        let q = normalized(query)?;
        self.unit
            .iter()
            .map(|v| {
                if v.len() != q.len() {
                    return Err(Error::shape("rank", format!("query {} vs index {}", q.len(), v.len())));
                }
                let d: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                Ok(d.clamp(-1.0, 1.0))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub score: f64,
}

/// Every indexed video by descending similarity; ties go to the smaller id.
pub fn rank_videos(query: &[f64], index: &VideoIndex) -> Result<Vec<ScoredVideo>> {
    if index.is_empty() {
        return Err(Error::invalid("cannot rank against an empty index"));
    }
    let scores = index.scores(query)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order
        .into_iter()
        .map(|i| ScoredVideo {
            video_id: index.ids[i].clone(),
            score: scores[i],
        })
        .collect())
}

/// 1-based position of `id` in the ordering [`rank_videos`] would produce.
pub fn rank_of(query: &[f64], index: &VideoIndex, id: &str) -> Result<usize> {
    let pos = index.position(id).ok_or_else(|| Error::UnknownVideo(id.to_string()))?;
    let scores = index.scores(query)?;
    let own = scores[pos];
    let ahead = scores
        .iter()
        .zip(&index.ids)
        .filter(|&(&s, other)| s > own || (s == own && other.as_str() < id))
        .count();
    Ok(ahead + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub round: usize,
    pub candidates: Vec<ScoredVideo>,
}

pub fn top_n(ranking: &[ScoredVideo], round: usize, n: usize) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::invalid("top_n needs n >= 1"));
    }
    Ok(CandidateSet {
        round,
        candidates: ranking.iter().take(n).cloned().collect(),
    })
}

/// Percentage of ranks at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("recall over an empty rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Mean rank and its standard error (sample standard deviation over √n).
pub fn mean_rank(ranks: &[usize]) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::invalid("mean rank of an empty rank list"));
    }
    let n = ranks.len() as f64;
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    if ranks.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = ranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal series of length >= 2"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("correlation of a constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub mean_rank_se: f64,
}

impl RoundMetrics {
    pub fn from_ranks(round: usize, ranks: &[usize]) -> Result<Self> {
        let (mean_rank, mean_rank_se) = mean_rank(ranks)?;
        Ok(RoundMetrics {
            round,
            r_at_1: recall_at_k(ranks, 1)?,
            r_at_5: recall_at_k(ranks, 5)?,
            r_at_10: recall_at_k(ranks, 10)?,
            mean_rank,
            mean_rank_se,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrajectory {
    pub video_id: String,
    /// GT rank after rounds `0..=T`.
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rounds: Vec<RoundMetrics>,
    pub trajectories: Vec<SampleTrajectory>,
    /// Samples without enough dialog rounds.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Aggregates trajectories that all cover rounds `0..=T`.
    pub fn from_trajectories(trajectories: Vec<SampleTrajectory>, skipped: Vec<String>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("no samples to evaluate"))?;
        let rounds_len = first.ranks.len();
        if trajectories.iter().any(|t| t.ranks.len() != rounds_len) {
            return Err(Error::invalid("trajectories of unequal length"));
        }
        let rounds = (0..rounds_len)
            .map(|t| {
                let ranks: Vec<usize> = trajectories.iter().map(|s| s.ranks[t]).collect();
                RoundMetrics::from_ranks(t, &ranks)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            rounds,
            trajectories,
            skipped,
        })
    }

    pub fn last(&self) -> &RoundMetrics {
        self.rounds.last().expect("reports have at least round 0")
    }

    /// Spearman correlation between round index and MeanR.
    pub fn mean_rank_trend(&self) -> Result<f64> {
        let x: Vec<f64> = self.rounds.iter().map(|r| r.round as f64).collect();
        let y: Vec<f64> = self.rounds.iter().map(|r| r.mean_rank).collect();
        spearman(&x, &y)
    }

    /// Rows of `round,metric,value,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,metric,value,stderr\n");
        for r in &self.rounds {
            out.push_str(&format!("{},R@1,{},\n", r.round, r.r_at_1));
            out.push_str(&format!("{},R@5,{},\n", r.round, r.r_at_5));
            out.push_str(&format!("{},R@10,{},\n", r.round, r.r_at_10));
            out.push_str(&format!("{},MeanR,{},{}\n", r.round, r.mean_rank, r.mean_rank_se));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Ranks each sample's GT video against `index` after rounds `0..=rounds`,
/// feeding the stored GT dialog incrementally.
pub fn evaluate_rounds(
    model: &RetrievalModel,
    samples: &[Sample],
    index: &VideoIndex,
    rounds: usize,
) -> Result<EvalReport> {
    let mut trajectories = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for sample in samples {
        if sample.rounds.len() < rounds {
            log::warn!(
                "skipping {}: {} rounds, {rounds} needed",
                sample.id,
                sample.rounds.len()
            );
            skipped.push(sample.id.clone());
            continue;
        }
        let mut state = model.begin_dialog(&sample.caption)?;
        let mut ranks = Vec::with_capacity(rounds + 1);
        ranks.push(rank_of(&model.embed_state(&state)?, index, &sample.id)?);
        for round in &sample.rounds[..rounds] {
            state = model.push_round(&state, round)?;
            ranks.push(rank_of(&model.embed_state(&state)?, index, &sample.id)?);
        }
        trajectories.push(SampleTrajectory {
            video_id: sample.id.clone(),
            ranks,
        });
    }
    EvalReport::from_trajectories(trajectories, skipped)
}

/// Test-split evaluation: index the samples themselves and rank against it.
pub fn evaluate_split(model: &RetrievalModel, samples: &[Sample], rounds: usize) -> Result<EvalReport> {
    let index = VideoIndex::build(model, samples)?;
    evaluate_rounds(model, samples, &index, rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> VideoIndex {
        VideoIndex::new(
            (0..n)
                .map(|i| {
                    (
                        format!("v{i:03}"),
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_video_index() {
        let idx = VideoIndex::new(vec![("a".into(), vec![1.0, 2.0])]).unwrap();
        let r = rank_videos(&[-1.0, 0.0], &idx).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].video_id, "a");
    }

    #[test]
    fn stored_embedding_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = random_index(&mut rng, 30, 6);
        let q = idx.unit[17].clone();
        let scaled: Vec<f64> = q.iter().map(|x| x * 3.5).collect();
        assert_eq!(rank_videos(&scaled, &idx).unwrap()[0].video_id, "v017");
        assert_eq!(rank_of(&scaled, &idx, "v017").unwrap(), 1);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = VideoIndex::new(vec![
            ("b".into(), vec![1.0, 0.0]),
            ("a".into(), vec![2.0, 0.0]),
            ("c".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        let r = rank_videos(&[1.0, 0.0], &idx).unwrap();
        let ids: Vec<_> = r.iter().map(|s| s.video_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(rank_of(&[1.0, 0.0], &idx, "b").unwrap(), 2);
    }

    #[test]
    fn errors() {
        assert!(VideoIndex::new(vec![("a".into(), vec![0.0])]).is_err());
        assert!(VideoIndex::new(vec![("a".into(), vec![1.0]), ("a".into(), vec![1.0])]).is_err());
        let empty = VideoIndex::new(vec![]).unwrap();
        assert!(rank_videos(&[1.0], &empty).is_err());
        assert!(recall_at_k(&[], 1).is_err());
        assert!(mean_rank(&[]).is_err());
    }

    #[test]
    fn metric_reference_values() {
        assert!((recall_at_k(&[1, 2, 30], 5).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[1, 2, 30], 30).unwrap(), 100.0);
        assert_eq!(mean_rank(&[1, 2, 3]).unwrap().0, 2.0);
        assert_eq!(mean_rank(&[5, 5, 5, 5]).unwrap().1, 0.0);
    }

    #[test]
    fn top_n_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = random_index(&mut rng, 8, 3);
        let r = rank_videos(&[0.1, 0.2, 0.3], &idx).unwrap();
        let five = top_n(&r, 0, 5).unwrap();
        let ten = top_n(&r, 0, 10).unwrap();
        assert_eq!(ten.candidates.len(), 8);
        assert_eq!(five.candidates[..], ten.candidates[..5]);
        assert!(top_n(&r, 0, 0).is_err());
    }

    #[test]
    fn spearman_reference() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn csv_has_four_rows_per_round() {
        let report = EvalReport::from_trajectories(
            vec![
                SampleTrajectory {
                    video_id: "a".into(),
                    ranks: vec![3, 1],
                },
                SampleTrajectory {
                    video_id: "b".into(),
                    ranks: vec![12, 6],
                },
            ],
            vec![],
        )
        .unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert!(csv.contains("1,MeanR,3.5,2.5"));
        assert_eq!(report.rounds[0].r_at_10, 50.0);
    }

    fn brute_recall(ranks: &[usize], k: usize) -> f64 {
        let mut hits = 0usize;
        for &r in ranks {
            if r <= k {
                hits += 1;
            }
        }
        hits as f64 * 100.0 / ranks.len() as f64
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(seed in 0u64..10_000, n in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, n, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = rank_videos(&q, &idx).unwrap();
            for w in r.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].video_id < w[1].video_id));
            }
            for (pos, s) in r.iter().enumerate() {
                prop_assert_eq!(rank_of(&q, &idx, &s.video_id).unwrap(), pos + 1);
            }
        }

        #[test]
        fn recall_is_monotone_and_matches_count(ranks in proptest::collection::vec(1usize..60, 1..100), k in 1usize..60) {
            let r = recall_at_k(&ranks, k).unwrap();
            prop_assert!((r - brute_recall(&ranks, k)).abs() < 1e-10);
            prop_assert!(r <= recall_at_k(&ranks, k + 1).unwrap());
        }

        #[test]
        fn rank_is_scale_invariant(seed in 0u64..10_000, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, 20, 4);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qs: Vec<f64> = q.iter().map(|x| x * k).collect();
            for id in idx.ids().to_vec() {
                prop_assert_eq!(rank_of(&q, &idx, &id).unwrap(), rank_of(&qs, &idx, &id).unwrap());
            }
        }
    }
}
