//! Property tests for retrieval, sampling, the loss, and the binary formats.

use std::collections::BTreeMap;

use flipsbir::dataset::{DatasetIndex, SampleRecord, Split};
use flipsbir::formats::{decode_embeddings, encode_embeddings};
use flipsbir::pipeline::EmbeddingSet;
use flipsbir::retrieval::{
    build_report, improvement_percentage, knn, retrieve, EmbeddingIndex, Neighbor, Query, RetrievalReport,
};
use flipsbir::sampling::{batch_violations, sample_batch, BatchSpec, Strategy as Sampler};
use flipsbir::training::triplet_term;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small integer coordinates, so distances are exact and ties are common.
fn grid_rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i32..=3).prop_map(f64::from), n * dim)
}

/// Ids are a shuffled, gappy set so tie-breaks cannot follow insertion order.
fn shuffled_ids(n: usize, seed: u64) -> Vec<u64> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

fn oracle(index: &EmbeddingIndex, query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(f64, u64)> = (0..index.len())
        .map(|p| {
            let d2 = index.row(p).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (d2, index.ids()[p])
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d2, id)| (id, d2.sqrt())).collect()
}

fn index_of(ids: Vec<u64>, dim: usize, data: Vec<f64>) -> EmbeddingIndex {
    let cats = ids.iter().map(|id| (*id % 4) as usize).collect();
    EmbeddingIndex::new(ids, dim, data, cats).unwrap()
}

fn ranked_ids(ns: &[Neighbor]) -> Vec<u64> {
    ns.iter().map(|n| n.id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_equals_exhaustive_sort(
        (n, dim, data, q, k_frac, seed) in (1usize..=1000, 1usize..=64)
            .prop_flat_map(|(n, d)| (Just(n), Just(d), grid_rows(n, d), grid_rows(1, d), 0.0f64..1.0, any::<u64>()))
    ) {
        let idx = index_of(shuffled_ids(n, seed), dim, data);
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let got: Vec<(u64, f64)> = knn(&idx, &q, k).unwrap().into_iter().map(|nb| (nb.id, nb.distance)).collect();
        prop_assert_eq!(got, oracle(&idx, &q, k));
    }

    #[test]
    fn rankings_survive_translation_and_power_of_two_scaling(
        (n, dim, data, qs, shift, exp, seed) in (2usize..=60, 1usize..=8).prop_flat_map(|(n, d)| (
            Just(n), Just(d), grid_rows(n, d), grid_rows(5, d),
            prop::collection::vec((-50i32..=50).prop_map(f64::from), d), -4i32..=4, any::<u64>(),
        ))
    ) {
        let ids = shuffled_ids(n, seed);
        let queries = |t: &dyn Fn(f64, usize) -> f64| -> Vec<Query> {
            qs.chunks(dim)
                .enumerate()
                .map(|(i, row)| Query {
                    id: i as u64,
                    embedding: row.iter().enumerate().map(|(j, &v)| t(v, j)).collect(),
                    ground_truth: ids[i % n],
                    category: 0,
                })
                .collect()
        };
        let moved = |t: &dyn Fn(f64, usize) -> f64| -> Vec<u64> {
            let data = data.chunks(dim).flat_map(|r| r.iter().enumerate().map(|(j, &v)| t(v, j)).collect::<Vec<_>>()).collect();
            let idx = index_of(ids.clone(), dim, data);
            retrieve(&idx, &queries(t), n).unwrap().iter().flat_map(|r| ranked_ids(&r.ranked)).collect()
        };
        let base = moved(&|v, _| v);
        prop_assert_eq!(&base, &moved(&|v, j| v + shift[j]));
        let c = 2f64.powi(exp);
        prop_assert_eq!(&base, &moved(&|v, _| v * c));
    }

    #[test]
    fn recall_is_monotone_and_rates_are_fractions(
        (n, data, qdata, gts, seed) in (2usize..=40).prop_flat_map(|n| (
            Just(n), grid_rows(n, 3), grid_rows(30, 3), prop::collection::vec(0..n, 30), any::<u64>(),
        ))
    ) {
        let ids = shuffled_ids(n, seed);
        let mirror: BTreeMap<u64, u64> = ids.chunks_exact(2).flat_map(|p| [(p[0], p[1]), (p[1], p[0])]).collect();
        let idx = index_of(ids.clone(), 3, data).with_mirror_map(mirror).unwrap();
        let queries: Vec<Query> = qdata
            .chunks(3)
            .zip(&gts)
            .enumerate()
            .map(|(i, (row, &g))| Query { id: i as u64, embedding: row.to_vec(), ground_truth: ids[g], category: (ids[g] % 4) as usize })
            .collect();
        let ks: Vec<usize> = (1..=n).collect();
        let report: RetrievalReport = build_report(&idx, &queries, &ks, BTreeMap::new()).unwrap();
        for w in report.recall.windows(2) {
            prop_assert!(w[0].value <= w[1].value);
        }
        prop_assert_eq!(report.recall(n), Some(1.0));
        for r in [report.flip_confusion_rate.unwrap(), report.category_mismatch_rate] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        prop_assert!(report.flip_confusion_count.unwrap() <= report.ground_truth_second_count);
        prop_assert!(report.category_mismatch_count <= report.ground_truth_second_count);
    }

    #[test]
    fn triplet_term_is_a_hinge(
        v in prop::collection::vec(-4.0f64..4.0, 12), margin in 0.01f64..5.0
    ) {
        let (a, p, n) = (&v[0..4], &v[4..8], &v[8..12]);
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(s, t)| (s - t) * (s - t)).sum::<f64>();
        let t = triplet_term(a, p, n, margin);
        prop_assert!(t >= 0.0);
        prop_assert_eq!(t == 0.0, d(a, n) - d(a, p) >= margin);
    }

    #[test]
    fn improvement_percentage_matches_its_definition(b in 1usize..10_000, c in 0usize..20_000) {
        let got = improvement_percentage(b, c).unwrap();
        prop_assert_eq!(got, 100.0 * (b as f64 - c as f64) / b as f64);
        prop_assert!(got <= 100.0);
    }

    #[test]
    fn embeddings_round_trip_bit_exactly(
        (n, dim, bits) in (0usize..40, 1usize..20).prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(any::<u64>(), n * d)))
    ) {
        let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let ids: Vec<u64> = (0..n as u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).collect();
        let set = EmbeddingSet::new(ids, dim, data).unwrap();
        let back = decode_embeddings(&encode_embeddings(&set).unwrap()).unwrap();
        prop_assert_eq!(&back.ids, &set.ids);
        prop_assert_eq!(back.dim, set.dim);
        let got: Vec<u64> = back.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }
}

fn toy_index(per_category: &[usize], mirrors: bool) -> DatasetIndex {
    let mut items = Vec::new();
    for (c, &n) in per_category.iter().enumerate() {
        for i in 0..n {
            let id = items.len() as u64;
            let sibling = (mirrors && n >= 2 && i < n - n % 2).then(|| if i % 2 == 0 { id + 1 } else { id - 1 });
            items.push(SampleRecord {
                instance_id: id,
                category_id: c,
                photo_path: String::new(),
                sketch_paths: vec![String::new(); 1 + i % 3],
                mirror_sibling_id: sibling,
            });
        }
    }
    DatasetIndex::new(items, per_category.len(), Split::Train).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_strategy_builds_valid_batches(
        per_category in prop::collection::vec(1usize..7, 1..6),
        bs in 2usize..40,
        frac in 0.01f64..=1.0,
        mirrors in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ds = toy_index(&per_category, mirrors);
        for strategy in [Sampler::Baseline, Sampler::Flip, Sampler::Category, Sampler::FlipCategory] {
            let spec = BatchSpec { batch_size: bs, strategy, flip_duplicate_fraction: frac, seed, ..BatchSpec::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match sample_batch(&ds, &spec, &mut rng) {
                Ok(batch) => {
                    prop_assert_eq!(batch.len(), bs);
                    let v = batch_violations(&batch, &ds, &spec);
                    prop_assert!(v.is_empty(), "{:?}: {:?}", strategy, v);
                    let again = sample_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                    prop_assert_eq!(again, batch);
                }
                Err(_) => {
                    // Only structural impossibilities may refuse: one instance overall,
                    // a singleton category under grouping, or no room for a flip pair.
                    let singleton = per_category.contains(&1);
                    let total: usize = per_category.iter().sum();
                    let allowed = total < 2
                        || (strategy.uses_groups() && singleton)
                        || (strategy.uses_flip_pairs() && spec.flip_pairs() == 0);
                    prop_assert!(allowed, "{:?} refused {:?} bs {}", strategy, per_category, bs);
                }
            }
        }
    }
}
