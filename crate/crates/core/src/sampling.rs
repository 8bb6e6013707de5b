//! Triplet mini-batch construction: baseline, flip, category, and flip+category strategies.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, DatasetIndex};
use crate::error::{ConfigError, SamplingError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Flip,
    Category,
    FlipCategory,
}

impl Strategy {
    pub fn uses_flip_pairs(self) -> bool {
        matches!(self, Strategy::Flip | Strategy::FlipCategory)
    }

    pub fn uses_groups(self) -> bool {
        matches!(self, Strategy::Category | Strategy::FlipCategory)
    }
}

impl std::str::FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "flip" => Ok(Strategy::Flip),
            "category" => Ok(Strategy::Category),
            "flip_category" | "flip-category" => Ok(Strategy::FlipCategory),
            other => Err(ConfigError::invalid("strategy", format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub strategy: Strategy,
    /// Fraction of slots occupied by flipped/unflipped duplicate pairs.
    pub flip_duplicate_fraction: f64,
    /// Inclusive bounds on how many instances of a category form one group.
    pub category_repeat_range: (usize, usize),
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 128,
            strategy: Strategy::Baseline,
            flip_duplicate_fraction: 0.5,
            category_repeat_range: (2, 5),
            seed: 0,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 2 {
            return Err(ConfigError::invalid("batch_size", "must be at least 2"));
        }
        if !(self.flip_duplicate_fraction > 0.0 && self.flip_duplicate_fraction <= 1.0) {
            return Err(ConfigError::invalid("flip_duplicate_fraction", "must lie in (0, 1]"));
        }
        let (lo, hi) = self.category_repeat_range;
        if lo < 2 || hi > 5 || lo > hi {
            return Err(ConfigError::invalid("category_repeat_range", "must satisfy 2 <= lo <= hi <= 5"));
        }
        Ok(())
    }

    /// Number of flipped/unflipped duplicate pairs in a flip-sampled batch.
    pub fn flip_pairs(&self) -> usize {
        (self.batch_size as f64 * self.flip_duplicate_fraction / 2.0).floor() as usize
    }
}

/// A sketch reference: item position in the dataset index and sketch number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SketchRef {
    pub item: usize,
    pub sketch: usize,
}

/// A run of slots filled from one category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryGroup {
    pub start: usize,
    pub len: usize,
    /// Group size drawn before truncation to the remaining slots.
    pub drawn: usize,
    pub category: usize,
}

/// Slot-aligned triplets. Slot `i` is (photo `anchors[i]`, sketch `positives[i]`,
/// sketch `negatives[i]`), all three mirrored iff `flip_flags[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<SketchRef>,
    pub negatives: Vec<SketchRef>,
    pub anchor_labels: Vec<usize>,
    pub positive_labels: Vec<usize>,
    pub negative_labels: Vec<usize>,
    pub flip_flags: Vec<bool>,
    /// Slot pairs showing the same photo and sketch in both orientations.
    pub twins: Vec<(usize, usize)>,
    pub groups: Vec<CategoryGroup>,
}

/// Rasters for one batch, with flips applied.
#[derive(Clone, Debug)]
pub struct BatchImages {
    pub anchors: Vec<Tensor>,
    pub positives: Vec<Tensor>,
    pub negatives: Vec<Tensor>,
}

impl TripletBatch {
    fn with_capacity(n: usize) -> Self {
        Self {
            anchors: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            negatives: Vec::with_capacity(n),
            anchor_labels: Vec::with_capacity(n),
            positive_labels: Vec::with_capacity(n),
            negative_labels: Vec::with_capacity(n),
            flip_flags: Vec::with_capacity(n),
            twins: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn push(&mut self, ds: &DatasetIndex, positive: SketchRef, negative: SketchRef, flip: bool) {
        self.anchors.push(positive.item);
        self.positives.push(positive);
        self.negatives.push(negative);
        self.anchor_labels.push(ds.category(positive.item));
        self.positive_labels.push(ds.category(positive.item));
        self.negative_labels.push(ds.category(negative.item));
        self.flip_flags.push(flip);
    }

    pub fn images(&self, ds: &Dataset) -> BatchImages {
        let flips = &self.flip_flags;
        BatchImages {
            anchors: self.anchors.iter().zip(flips).map(|(&a, &f)| ds.photo(a, f)).collect(),
            positives: self.positives.iter().zip(flips).map(|(s, &f)| ds.sketch(s.item, s.sketch, f)).collect(),
            negatives: self.negatives.iter().zip(flips).map(|(s, &f)| ds.sketch(s.item, s.sketch, f)).collect(),
        }
    }
}

/// `count` item positions out of `0..n`, distinct whenever `count <= n`.
fn draw_items(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(n);
        out.extend(index::sample(rng, n, take));
    }
    out
}

fn random_sketch(ds: &DatasetIndex, item: usize, rng: &mut impl Rng) -> SketchRef {
    SketchRef {
        item,
        sketch: rng.random_range(0..ds.sketch_count(item)),
    }
}

/// Uniform sketch of any instance other than `item`.
fn other_instance_sketch(ds: &DatasetIndex, item: usize, rng: &mut impl Rng) -> SketchRef {
    let mut other = rng.random_range(0..ds.len() - 1);
    if other >= item {
        other += 1;
    }
    random_sketch(ds, other, rng)
}

/// Uniform sketch of another instance of the same category.
fn same_category_sketch(ds: &DatasetIndex, item: usize, rng: &mut impl Rng) -> SketchRef {
    let members = &ds.by_category()[ds.category(item)];
    let at = members.iter().position(|&m| m == item).expect("item listed under its category");
    let mut k = rng.random_range(0..members.len() - 1);
    if k >= at {
        k += 1;
    }
    random_sketch(ds, members[k], rng)
}

fn check_common(ds: &DatasetIndex, spec: &BatchSpec) -> Result<(), SamplingError> {
    spec.validate()?;
    if ds.len() < 2 {
        return Err(SamplingError::TooFewInstances(ds.len()));
    }
    Ok(())
}

fn fill_baseline(ds: &DatasetIndex, count: usize, batch: &mut TripletBatch, rng: &mut impl Rng) {
    for item in draw_items(ds.len(), count, rng) {
        let pos = random_sketch(ds, item, rng);
        let flip = rng.random_bool(0.5);
        let neg = other_instance_sketch(ds, item, rng);
        batch.push(ds, pos, neg, flip);
    }
}

pub fn sample_baseline_batch(ds: &DatasetIndex, spec: &BatchSpec, rng: &mut impl Rng) -> Result<TripletBatch, SamplingError> {
    check_common(ds, spec)?;
    let mut batch = TripletBatch::with_capacity(spec.batch_size);
    fill_baseline(ds, spec.batch_size, &mut batch, rng);
    Ok(batch)
}

fn flip_pairs_checked(spec: &BatchSpec) -> Result<usize, SamplingError> {
    match spec.flip_pairs() {
        0 => Err(SamplingError::BatchTooSmall {
            batch_size: spec.batch_size,
            fraction: spec.flip_duplicate_fraction,
        }),
        n => Ok(n),
    }
}

pub fn sample_flip_batch(ds: &DatasetIndex, spec: &BatchSpec, rng: &mut impl Rng) -> Result<TripletBatch, SamplingError> {
    check_common(ds, spec)?;
    let pairs = flip_pairs_checked(spec)?;
    let singles = spec.batch_size - 2 * pairs;
    let items = draw_items(ds.len(), pairs + singles, rng);
    let mut batch = TripletBatch::with_capacity(spec.batch_size);
    for &item in &items[..pairs] {
        let pos = random_sketch(ds, item, rng);
        let start = batch.len();
        for flip in [false, true] {
            let neg = other_instance_sketch(ds, item, rng);
            batch.push(ds, pos, neg, flip);
        }
        batch.twins.push((start, start + 1));
    }
    for &item in &items[pairs..] {
        let pos = random_sketch(ds, item, rng);
        let flip = rng.random_bool(0.5);
        let neg = other_instance_sketch(ds, item, rng);
        batch.push(ds, pos, neg, flip);
    }
    Ok(batch)
}

/// Draws one group size uniformly from the inclusive repeat range.
pub fn draw_group_size(range: (usize, usize), rng: &mut impl Rng) -> usize {
    rng.random_range(range.0..=range.1)
}

fn check_groupable(ds: &DatasetIndex) -> Result<Vec<usize>, SamplingError> {
    let mut present = Vec::new();
    for (c, members) in ds.by_category().iter().enumerate() {
        match members.len() {
            0 => {}
            1 => return Err(SamplingError::SingletonCategory(c)),
            _ => present.push(c),
        }
    }
    Ok(present)
}

fn fill_groups(ds: &DatasetIndex, spec: &BatchSpec, slots: usize, present: &[usize], batch: &mut TripletBatch, rng: &mut impl Rng) {
    while batch.len() < slots {
        let category = present[rng.random_range(0..present.len())];
        let members = &ds.by_category()[category];
        let drawn = draw_group_size(spec.category_repeat_range, rng).min(members.len());
        let len = drawn.min(slots - batch.len());
        let chosen = index::sample(rng, members.len(), drawn);
        batch.groups.push(CategoryGroup {
            start: batch.len(),
            len,
            drawn,
            category,
        });
        for k in chosen.into_iter().take(len) {
            let item = members[k];
            let pos = random_sketch(ds, item, rng);
            let flip = rng.random_bool(0.5);
            let neg = same_category_sketch(ds, item, rng);
            batch.push(ds, pos, neg, flip);
        }
    }
}

pub fn sample_category_batch(ds: &DatasetIndex, spec: &BatchSpec, rng: &mut impl Rng) -> Result<TripletBatch, SamplingError> {
    check_common(ds, spec)?;
    let present = check_groupable(ds)?;
    let mut batch = TripletBatch::with_capacity(spec.batch_size);
    fill_groups(ds, spec, spec.batch_size, &present, &mut batch, rng);
    Ok(batch)
}

/// Category groups first; then some grouped slots are shown unflipped and
/// get a flipped twin appended at the end of the batch.
pub fn sample_flip_category_batch(ds: &DatasetIndex, spec: &BatchSpec, rng: &mut impl Rng) -> Result<TripletBatch, SamplingError> {
    check_common(ds, spec)?;
    let pairs = flip_pairs_checked(spec)?;
    let present = check_groupable(ds)?;
    let grouped = spec.batch_size - pairs;
    let mut batch = TripletBatch::with_capacity(spec.batch_size);
    fill_groups(ds, spec, grouped, &present, &mut batch, rng);
    let mut sources: Vec<usize> = index::sample(rng, grouped, pairs).into_vec();
    sources.sort_unstable();
    for src in sources {
        batch.flip_flags[src] = false;
        let pos = batch.positives[src];
        let neg = same_category_sketch(ds, pos.item, rng);
        let at = batch.len();
        batch.push(ds, pos, neg, true);
        batch.twins.push((src, at));
    }
    Ok(batch)
}

pub fn sample_batch(ds: &DatasetIndex, spec: &BatchSpec, rng: &mut impl Rng) -> Result<TripletBatch, SamplingError> {
    match spec.strategy {
        Strategy::Baseline => sample_baseline_batch(ds, spec, rng),
        Strategy::Flip => sample_flip_batch(ds, spec, rng),
        Strategy::Category => sample_category_batch(ds, spec, rng),
        Strategy::FlipCategory => sample_flip_category_batch(ds, spec, rng),
    }
}

/// Every contract violation of `batch` under `spec`; empty when the batch is valid.
pub fn batch_violations(batch: &TripletBatch, ds: &DatasetIndex, spec: &BatchSpec) -> Vec<String> {
    let mut v = Vec::new();
    let n = batch.len();
    let columns = [
        batch.positives.len(),
        batch.negatives.len(),
        batch.anchor_labels.len(),
        batch.positive_labels.len(),
        batch.negative_labels.len(),
        batch.flip_flags.len(),
    ];
    if columns.iter().any(|&c| c != n) {
        v.push(format!("column lengths differ: anchors {n}, others {columns:?}"));
        return v;
    }
    if n != spec.batch_size {
        v.push(format!("batch has {n} slots, expected {}", spec.batch_size));
    }
    let ids = ds.items();
    for i in 0..n {
        let (a, p, q) = (batch.anchors[i], batch.positives[i], batch.negatives[i]);
        if a >= ds.len() || p.item >= ds.len() || q.item >= ds.len() {
            v.push(format!("slot {i}: item out of range"));
            continue;
        }
        if ids[p.item].instance_id != ids[a].instance_id {
            v.push(format!("slot {i}: positive depicts another instance"));
        }
        if ids[q.item].instance_id == ids[a].instance_id {
            v.push(format!("slot {i}: negative depicts the anchor instance"));
        }
        if p.sketch >= ds.sketch_count(p.item) || q.sketch >= ds.sketch_count(q.item) {
            v.push(format!("slot {i}: sketch index out of range"));
        }
        if batch.anchor_labels[i] != ds.category(a)
            || batch.positive_labels[i] != ds.category(p.item)
            || batch.negative_labels[i] != ds.category(q.item)
        {
            v.push(format!("slot {i}: label does not match the dataset"));
        }
    }

    if spec.strategy.uses_flip_pairs() {
        let expected = spec.flip_pairs();
        if batch.twins.len() != expected {
            v.push(format!("{} duplicate pairs, expected {expected}", batch.twins.len()));
        }
        let mut used = vec![false; n];
        for &(s, t) in &batch.twins {
            if s >= n || t >= n || s == t {
                v.push(format!("twin ({s}, {t}) out of range"));
                continue;
            }
            if used[s] || used[t] {
                v.push(format!("slot in twin ({s}, {t}) reused"));
            }
            used[s] = true;
            used[t] = true;
            if batch.positives[s] != batch.positives[t] {
                v.push(format!("twin ({s}, {t}) shows different samples"));
            }
            if batch.flip_flags[s] == batch.flip_flags[t] {
                v.push(format!("twin ({s}, {t}) has one orientation only"));
            }
        }
        if spec.strategy == Strategy::Flip {
            for (k, &(s, t)) in batch.twins.iter().enumerate() {
                if (s, t) != (2 * k, 2 * k + 1) {
                    v.push(format!("twin {k} not at the head of the batch"));
                }
            }
        }
    } else if !batch.twins.is_empty() {
        v.push("duplicate pairs present without flip sampling".into());
    }

    if spec.strategy.uses_groups() {
        let grouped = if spec.strategy == Strategy::FlipCategory {
            spec.batch_size.saturating_sub(spec.flip_pairs())
        } else {
            spec.batch_size
        };
        let (lo, hi) = spec.category_repeat_range;
        let mut next = 0;
        for (g, grp) in batch.groups.iter().enumerate() {
            if grp.start != next {
                v.push(format!("group {g} does not follow the previous group"));
            }
            next = grp.start + grp.len;
            let last = g + 1 == batch.groups.len();
            let size_ok = (lo..=hi).contains(&grp.len) || (last && grp.len >= 1 && grp.len < grp.drawn);
            if !size_ok {
                v.push(format!("group {g} has {} slots outside {lo}..={hi}", grp.len));
            }
            if next > n {
                v.push(format!("group {g} runs past the batch"));
                continue;
            }
            let slots = grp.start..next;
            let mut members: Vec<usize> = slots.clone().map(|i| batch.anchors[i]).collect();
            members.sort_unstable();
            members.dedup();
            if members.len() != grp.len {
                v.push(format!("group {g} repeats an instance"));
            }
            for i in slots {
                if batch.anchor_labels[i] != grp.category {
                    v.push(format!("slot {i} outside its group's category"));
                }
                if batch.negative_labels[i] != batch.anchor_labels[i] {
                    v.push(format!("slot {i}: grouped negative from another category"));
                }
            }
        }
        if next != grouped {
            v.push(format!("groups cover {next} slots, expected {grouped}"));
        }
        for &(s, t) in &batch.twins {
            if s < n && t < n && batch.negative_labels[t] != batch.anchor_labels[t] {
                v.push(format!("twin slot {t}: negative from another category"));
            }
        }
    } else if !batch.groups.is_empty() {
        v.push("category groups present without category sampling".into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SampleRecord, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(per_category: &[usize]) -> DatasetIndex {
        let mut items = Vec::new();
        for (c, &n) in per_category.iter().enumerate() {
            for _ in 0..n {
                let id = items.len() as u64;
                items.push(SampleRecord {
                    instance_id: id,
                    category_id: c,
                    photo_path: String::new(),
                    sketch_paths: vec![String::new(); 3],
                    mirror_sibling_id: None,
                });
            }
        }
        DatasetIndex::new(items, per_category.len(), Split::Train).unwrap()
    }

    fn spec(bs: usize, strategy: Strategy) -> BatchSpec {
        BatchSpec {
            batch_size: bs,
            strategy,
            ..BatchSpec::default()
        }
    }

    #[test]
    fn two_instances_negatives_come_from_the_other() {
        let ds = toy(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let b = sample_baseline_batch(&ds, &spec(2, Strategy::Baseline), &mut rng).unwrap();
            for i in 0..2 {
                assert_eq!(b.negatives[i].item, 1 - b.anchors[i]);
            }
        }
    }

    #[test]
    fn baseline_needs_two_instances() {
        let ds = toy(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_baseline_batch(&ds, &spec(2, Strategy::Baseline), &mut rng),
            Err(SamplingError::TooFewInstances(1))
        );
    }

    #[test]
    fn flip_bs4_has_one_duplicated_instance() {
        let ds = toy(&[10, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_flip_batch(&ds, &spec(4, Strategy::Flip), &mut rng).unwrap();
        let mut items = b.anchors.clone();
        items.sort_unstable();
        items.dedup();
        assert_eq!(items.len(), 3);
        assert_eq!(b.twins, vec![(0, 1)]);
        assert_ne!(b.flip_flags[0], b.flip_flags[1]);
    }

    #[test]
    fn flip_full_fraction() {
        let ds = toy(&[100, 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = BatchSpec {
            flip_duplicate_fraction: 1.0,
            ..spec(128, Strategy::Flip)
        };
        let b = sample_flip_batch(&ds, &s, &mut rng).unwrap();
        assert_eq!(b.twins.len(), 64);
        let mut items = b.anchors.clone();
        items.sort_unstable();
        items.dedup();
        assert_eq!(items.len(), 64);
        assert_eq!(b.flip_flags.iter().filter(|&&f| f).count(), 64);
    }

    #[test]
    fn flip_rejects_tiny_batches() {
        let ds = toy(&[4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = BatchSpec {
            flip_duplicate_fraction: 0.25,
            ..spec(4, Strategy::Flip)
        };
        assert!(matches!(sample_flip_batch(&ds, &s, &mut rng), Err(SamplingError::BatchTooSmall { .. })));
    }

    #[test]
    fn category_rejects_singletons() {
        let ds = toy(&[3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_category_batch(&ds, &spec(8, Strategy::Category), &mut rng),
            Err(SamplingError::SingletonCategory(1))
        );
    }

    #[test]
    fn category_bs8_multiplicity() {
        let ds = toy(&[6, 6, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = sample_category_batch(&ds, &spec(8, Strategy::Category), &mut rng).unwrap();
            assert!(batch_violations(&b, &ds, &spec(8, Strategy::Category)).is_empty());
            let last = *b.groups.last().unwrap();
            for g in &b.groups[..b.groups.len() - 1] {
                assert!((2..=5).contains(&g.len));
            }
            assert!(last.len >= 1);
        }
    }

    #[test]
    fn strategies_are_seed_deterministic_and_valid() {
        let ds = toy(&[5, 7, 3, 9]);
        for strategy in [Strategy::Baseline, Strategy::Flip, Strategy::Category, Strategy::FlipCategory] {
            let s = spec(16, strategy);
            let a = sample_batch(&ds, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = sample_batch(&ds, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
            assert_eq!(batch_violations(&a, &ds, &s), Vec::<String>::new(), "{strategy:?}");
        }
    }

    #[test]
    fn validator_catches_broken_batches() {
        let ds = toy(&[5, 5]);
        let s = spec(8, Strategy::Flip);
        let good = sample_batch(&ds, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut bad = good.clone();
        bad.negatives[3].item = bad.anchors[3];
        assert!(!batch_violations(&bad, &ds, &s).is_empty());
        let mut bad = good.clone();
        bad.flip_flags[1] = bad.flip_flags[0];
        assert!(!batch_violations(&bad, &ds, &s).is_empty());
        let mut bad = good;
        bad.positives[2].item = (bad.anchors[2] + 1) % 10;
        assert!(!batch_violations(&bad, &ds, &s).is_empty());
    }

    #[test]
    fn spec_validation() {
        assert!(BatchSpec { batch_size: 1, ..BatchSpec::default() }.validate().is_err());
        assert!(BatchSpec { flip_duplicate_fraction: 0.0, ..BatchSpec::default() }.validate().is_err());
        assert!(BatchSpec { category_repeat_range: (1, 5), ..BatchSpec::default() }.validate().is_err());
        assert!(BatchSpec { category_repeat_range: (2, 6), ..BatchSpec::default() }.validate().is_err());
        assert_eq!("flip_category".parse::<Strategy>().unwrap(), Strategy::FlipCategory);
    }
}
