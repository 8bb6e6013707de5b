//! Exact Euclidean k-NN over photo embeddings, recall@k, and error diagnostics.
//!
//! Rankings order photos by squared Euclidean distance, ties broken by
//! ascending photo id, so every ranked list is fully deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::RetrievalError;

type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    dim: usize,
    data: Vec<f64>,
    categories: Vec<usize>,
    mirror: Option<BTreeMap<u64, u64>>,
    position: HashMap<u64, usize>,
}

impl EmbeddingIndex {
    /// `data` holds one row of length `dim` per id.
    pub fn new(ids: Vec<u64>, dim: usize, data: Vec<f64>, categories: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(RetrievalError::Invalid("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim || categories.len() != ids.len() {
            return Err(RetrievalError::Invalid(format!(
                "{} ids, {} categories, {} values for dimension {dim}",
                ids.len(),
                categories.len(),
                data.len()
            )));
        }
        let mut position = HashMap::with_capacity(ids.len());
        for (p, &id) in ids.iter().enumerate() {
            if position.insert(id, p).is_some() {
                return Err(RetrievalError::DuplicateId(id));
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            categories,
            mirror: None,
            position,
        })
    }

    /// Attaches a photo id → mirrored photo id map; it must be symmetric.
    pub fn with_mirror_map(mut self, map: BTreeMap<u64, u64>) -> Result<Self> {
        for (&a, &b) in &map {
            if map.get(&b) != Some(&a) {
                return Err(RetrievalError::AsymmetricMirrorMap(a));
            }
        }
        self.mirror = Some(map);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn category_of(&self, id: u64) -> Option<usize> {
        self.position.get(&id).map(|&p| self.categories[p])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.position.contains_key(&id)
    }

    pub fn mirror_map(&self) -> Option<&BTreeMap<u64, u64>> {
        self.mirror.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
    pub category: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_key(a: &(f64, u64, usize), b: &(f64, u64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest photos to `query`, nearest first.
pub fn knn(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if k > index.len() {
        return Err(RetrievalError::KTooLarge { k, n: index.len() });
    }
    if query.len() != index.dim {
        return Err(RetrievalError::DimMismatch {
            query: query.len(),
            index: index.dim,
        });
    }
    let mut keyed: Vec<(f64, u64, usize)> = (0..index.len())
        .map(|p| (squared_distance(query, index.row(p)), index.ids[p], p))
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, by_key);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(by_key);
    Ok(keyed
        .into_iter()
        .map(|(d2, id, p)| Neighbor {
            id,
            distance: d2.sqrt(),
            category: index.categories[p],
        })
        .collect())
}

/// A sketch query with its known matching photo.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub ground_truth: u64,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub ground_truth: u64,
    pub query_category: usize,
    pub ranked: Vec<Neighbor>,
}

impl RetrievalResult {
    /// 1-based rank of the ground truth within the stored list.
    pub fn ground_truth_rank(&self) -> Option<usize> {
        self.ranked.iter().position(|n| n.id == self.ground_truth).map(|r| r + 1)
    }

    fn ground_truth_second(&self) -> bool {
        self.ranked.len() >= 2 && self.ranked[1].id == self.ground_truth
    }
}

/// Runs every query against the index, keeping the top `depth` photos.
pub fn retrieve(index: &EmbeddingIndex, queries: &[Query], depth: usize) -> Result<Vec<RetrievalResult>> {
    queries
        .par_iter()
        .map(|q| {
            if !index.contains(q.ground_truth) {
                return Err(RetrievalError::Invalid(format!(
                    "ground truth {} of query {} is not in the index",
                    q.ground_truth, q.id
                )));
            }
            Ok(RetrievalResult {
                query_id: q.id,
                ground_truth: q.ground_truth,
                query_category: q.category,
                ranked: knn(index, &q.embedding, depth)?,
            })
        })
        .collect()
}

/// Fraction of queries whose ground-truth photo is among the first `k`.
pub fn recall_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if results.is_empty() {
        return Err(RetrievalError::EmptyResults);
    }
    let mut hits = 0;
    for r in results {
        if k > r.ranked.len() {
            return Err(RetrievalError::KTooLarge { k, n: r.ranked.len() });
        }
        if r.ranked[..k].iter().any(|n| n.id == r.ground_truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Queries with the ground truth at rank 2 behind its own mirror image.
pub fn flip_confusion_count(results: &[RetrievalResult], index: &EmbeddingIndex) -> Result<usize> {
    let mirror = index.mirror_map().ok_or(RetrievalError::MissingMirrorMap)?;
    Ok(results
        .iter()
        .filter(|r| r.ground_truth_second() && mirror.get(&r.ground_truth) == Some(&r.ranked[0].id))
        .count())
}

pub fn flip_confusion_rate(results: &[RetrievalResult], index: &EmbeddingIndex) -> Result<f64> {
    if results.is_empty() {
        return Err(RetrievalError::EmptyResults);
    }
    Ok(flip_confusion_count(results, index)? as f64 / results.len() as f64)
}

/// `(mismatches, eligible)`: among queries with the ground truth at rank 2,
/// how many have a rank-1 photo from another category.
pub fn category_mismatch_counts(results: &[RetrievalResult]) -> (usize, usize) {
    let eligible: Vec<&RetrievalResult> = results.iter().filter(|r| r.ground_truth_second()).collect();
    let mismatched = eligible.iter().filter(|r| r.ranked[0].category != r.query_category).count();
    (mismatched, eligible.len())
}

/// Mismatch fraction among rank-2 queries; 0 when there are none.
pub fn category_mismatch_rate(results: &[RetrievalResult]) -> f64 {
    match category_mismatch_counts(results) {
        (_, 0) => 0.0,
        (m, e) => m as f64 / e as f64,
    }
}

/// Relative error reduction in percent; negative when errors grew.
pub fn improvement_percentage(baseline_errors: usize, new_errors: usize) -> Result<f64> {
    if baseline_errors == 0 {
        return Err(RetrievalError::ZeroBaseline);
    }
    Ok(100.0 * (baseline_errors as f64 - new_errors as f64) / baseline_errors as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub num_queries: usize,
    pub num_photos: usize,
    pub recall: Vec<RecallAtK>,
    /// `None` when the photo set carries no mirror annotations.
    pub flip_confusion_rate: Option<f64>,
    pub flip_confusion_count: Option<usize>,
    pub category_mismatch_rate: f64,
    pub category_mismatch_count: usize,
    pub ground_truth_second_count: usize,
    pub provenance: BTreeMap<String, String>,
    pub queries: Vec<RetrievalResult>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    /// Queries whose ground truth is not ranked first.
    pub fn top1_miss_count(&self) -> usize {
        self.queries.iter().filter(|q| q.ground_truth_rank() != Some(1)).count()
    }
}

/// Ranking depth needed to answer every requested `k` and the rank-2 diagnostics.
pub fn report_depth(ks: &[usize], num_photos: usize) -> usize {
    ks.iter().copied().max().unwrap_or(1).max(2).min(num_photos)
}

pub fn build_report(
    index: &EmbeddingIndex,
    queries: &[Query],
    ks: &[usize],
    provenance: BTreeMap<String, String>,
) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(RetrievalError::EmptyResults);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.first() == Some(&0) {
        return Err(RetrievalError::ZeroK);
    }
    if let Some(&k) = ks.last() {
        if k > index.len() {
            return Err(RetrievalError::KTooLarge { k, n: index.len() });
        }
    }
    let results = retrieve(index, queries, report_depth(&ks, index.len()))?;
    let recall = ks
        .iter()
        .map(|&k| Ok(RecallAtK { k, value: recall_at_k(&results, k)? }))
        .collect::<Result<Vec<_>>>()?;
    let flip_count = match index.mirror_map() {
        Some(_) => Some(flip_confusion_count(&results, index)?),
        None => None,
    };
    let (mismatch, second) = category_mismatch_counts(&results);
    Ok(RetrievalReport {
        num_queries: results.len(),
        num_photos: index.len(),
        recall,
        flip_confusion_rate: flip_count.map(|c| c as f64 / results.len() as f64),
        flip_confusion_count: flip_count,
        category_mismatch_rate: category_mismatch_rate(&results),
        category_mismatch_count: mismatch,
        ground_truth_second_count: second,
        provenance,
        queries: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallDelta {
    pub k: usize,
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDelta {
    pub metric: String,
    pub baseline_count: usize,
    pub candidate_count: usize,
    /// `None` when the baseline made no errors but the candidate did.
    pub improvement_percentage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub recall: Vec<RecallDelta>,
    pub errors: Vec<ErrorDelta>,
}

fn error_delta(metric: &str, baseline: usize, candidate: usize) -> ErrorDelta {
    let improvement = match (baseline, candidate) {
        (0, 0) => Some(0.0),
        (0, _) => None,
        (b, c) => improvement_percentage(b, c).ok(),
    };
    ErrorDelta {
        metric: metric.to_string(),
        baseline_count: baseline,
        candidate_count: candidate,
        improvement_percentage: improvement,
    }
}

/// Per-metric changes from `baseline` to `candidate`; both must cover the same queries.
pub fn compare_reports(baseline: &RetrievalReport, candidate: &RetrievalReport) -> Result<Comparison> {
    if baseline.num_queries != candidate.num_queries {
        return Err(RetrievalError::Invalid(format!(
            "reports cover {} and {} queries",
            baseline.num_queries, candidate.num_queries
        )));
    }
    let recall = baseline
        .recall
        .iter()
        .filter_map(|b| {
            candidate.recall(b.k).map(|c| RecallDelta {
                k: b.k,
                baseline: b.value,
                candidate: c,
                delta: c - b.value,
            })
        })
        .collect();
    let mut errors = vec![
        error_delta("top1_miss", baseline.top1_miss_count(), candidate.top1_miss_count()),
        error_delta("category_mismatch", baseline.category_mismatch_count, candidate.category_mismatch_count),
    ];
    if let (Some(b), Some(c)) = (baseline.flip_confusion_count, candidate.flip_confusion_count) {
        errors.push(error_delta("flip_confusion", b, c));
    }
    Ok(Comparison { recall, errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[(u64, Vec<f64>, usize)]) -> EmbeddingIndex {
        EmbeddingIndex::new(
            rows.iter().map(|r| r.0).collect(),
            rows[0].1.len(),
            rows.iter().flat_map(|r| r.1.clone()).collect(),
            rows.iter().map(|r| r.2).collect(),
        )
        .unwrap()
    }

    fn result(gt: u64, cat: usize, ranked: &[(u64, usize)]) -> RetrievalResult {
        RetrievalResult {
            query_id: gt,
            ground_truth: gt,
            query_category: cat,
            ranked: ranked
                .iter()
                .enumerate()
                .map(|(i, &(id, category))| Neighbor {
                    id,
                    distance: i as f64,
                    category,
                })
                .collect(),
        }
    }

    #[test]
    fn exact_match_ranks_first() {
        let idx = index(&[(1, vec![0.0, 0.0], 0), (2, vec![1.0, 2.0], 0), (3, vec![5.0, 5.0], 1)]);
        let r = knn(&idx, &[1.0, 2.0], 2).unwrap();
        assert_eq!(r[0].id, 2);
        assert_eq!(r[0].distance, 0.0);
        assert_eq!(r[1].id, 1);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = index(&[(7, vec![1.0, 0.0], 0), (3, vec![1.0, 0.0], 0), (5, vec![-4.0, 0.0], 0)]);
        let r = knn(&idx, &[0.0, 0.0], 3).unwrap();
        assert_eq!(r.iter().map(|n| n.id).collect::<Vec<_>>(), vec![3, 7, 5]);
    }

    #[test]
    fn knn_errors() {
        let idx = index(&[(1, vec![0.0], 0)]);
        assert_eq!(knn(&idx, &[0.0], 2), Err(RetrievalError::KTooLarge { k: 2, n: 1 }));
        assert_eq!(knn(&idx, &[0.0, 1.0], 1), Err(RetrievalError::DimMismatch { query: 2, index: 1 }));
        assert_eq!(knn(&idx, &[0.0], 0), Err(RetrievalError::ZeroK));
        assert!(EmbeddingIndex::new(vec![1, 1], 1, vec![0.0, 1.0], vec![0, 0]).is_err());
    }

    #[test]
    fn recall_examples() {
        let perfect = vec![result(1, 0, &[(1, 0), (2, 0)]), result(2, 0, &[(2, 0), (1, 0)])];
        assert_eq!(recall_at_k(&perfect, 1).unwrap(), 1.0);
        let second = vec![result(1, 0, &[(2, 0), (1, 0)]), result(2, 0, &[(1, 0), (2, 0)])];
        assert_eq!(recall_at_k(&second, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&second, 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[], 1), Err(RetrievalError::EmptyResults));
    }

    #[test]
    fn flip_confusion_examples() {
        let mirror: BTreeMap<u64, u64> = [(1, 2), (2, 1)].into_iter().collect();
        let idx = index(&[(1, vec![0.0], 0), (2, vec![1.0], 0), (3, vec![2.0], 1)]);
        assert_eq!(
            flip_confusion_rate(&[result(1, 0, &[(1, 0), (2, 0)])], &idx),
            Err(RetrievalError::MissingMirrorMap)
        );
        let idx = idx.with_mirror_map(mirror).unwrap();
        let none = vec![result(1, 0, &[(1, 0), (2, 0)]), result(2, 0, &[(3, 1), (2, 0)])];
        assert_eq!(flip_confusion_rate(&none, &idx).unwrap(), 0.0);
        let all = vec![result(1, 0, &[(2, 0), (1, 0)]), result(2, 0, &[(1, 0), (2, 0)])];
        assert_eq!(flip_confusion_rate(&all, &idx).unwrap(), 1.0);
    }

    #[test]
    fn asymmetric_mirror_map_rejected() {
        let idx = index(&[(1, vec![0.0], 0), (2, vec![1.0], 0)]);
        let bad: BTreeMap<u64, u64> = [(1, 2)].into_iter().collect();
        assert_eq!(idx.with_mirror_map(bad), Err(RetrievalError::AsymmetricMirrorMap(1)));
    }

    #[test]
    fn category_mismatch_examples() {
        let perfect = vec![result(1, 0, &[(1, 0), (2, 1)])];
        assert_eq!(category_mismatch_rate(&perfect), 0.0);
        let wrong = vec![result(1, 0, &[(5, 1), (1, 0)]), result(2, 0, &[(6, 2), (2, 0)])];
        assert_eq!(category_mismatch_rate(&wrong), 1.0);
        let mixed = vec![result(1, 0, &[(5, 1), (1, 0)]), result(2, 0, &[(6, 0), (2, 0)]), result(3, 0, &[(9, 1), (8, 1), (3, 0)])];
        assert_eq!(category_mismatch_counts(&mixed), (1, 2));
    }

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_percentage(100, 90).unwrap(), 10.0);
        assert_eq!(improvement_percentage(50, 50).unwrap(), 0.0);
        assert_eq!(improvement_percentage(40, 50).unwrap(), -25.0);
        assert_eq!(improvement_percentage(0, 5), Err(RetrievalError::ZeroBaseline));
    }

    #[test]
    fn report_and_self_comparison() {
        let idx = index(&[(1, vec![0.0, 0.0], 0), (2, vec![3.0, 0.0], 1), (3, vec![0.0, 4.0], 1)])
            .with_mirror_map([(1, 2), (2, 1)].into_iter().collect())
            .unwrap();
        let queries = vec![
            Query { id: 10, embedding: vec![0.1, 0.0], ground_truth: 1, category: 0 },
            Query { id: 20, embedding: vec![1.0, 0.0], ground_truth: 2, category: 1 },
            Query { id: 30, embedding: vec![0.0, 3.0], ground_truth: 3, category: 1 },
        ];
        let rep = build_report(&idx, &queries, &[2, 1], BTreeMap::new()).unwrap();
        assert_eq!(rep.recall.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(rep.recall(1), Some(2.0 / 3.0));
        assert_eq!(rep.recall(2), Some(1.0));
        assert_eq!(rep.flip_confusion_count, Some(1));
        assert_eq!(rep.category_mismatch_count, 1);
        let cmp = compare_reports(&rep, &rep).unwrap();
        assert!(cmp.recall.iter().all(|d| d.delta == 0.0));
        assert!(cmp.errors.iter().all(|e| e.improvement_percentage == Some(0.0)));
    }
}
