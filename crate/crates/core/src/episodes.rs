//! Class splits and N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::rng::{purpose, stream, Rng};

/// Fraction of each base class held out for validation under
/// [`ValMode::BaseSubsample20Pct`].
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValMode {
    #[serde(rename = "disjoint-classes")]
    DisjointClasses,
    #[serde(rename = "base-subsample-20pct")]
    BaseSubsample20Pct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl Phase {
    fn key(self) -> u64 {
        match self {
            Phase::Train => 0,
            Phase::Val => 1,
            Phase::Test => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "val" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize, seed: u64) -> Result<Self> {
        let s = EpisodeSpec {
            n_way,
            k_shot,
            n_query,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.n_query < 1 {
            return Err(Error::Config(format!(
                "episode shape needs N ≥ 2, K ≥ 1, Q ≥ 1 (got N={}, K={}, Q={})",
                self.n_way, self.k_shot, self.n_query
            )));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.n_query
    }
}

/// Episodes per epoch for each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for EpisodeCounts {
    fn default() -> Self {
        EpisodeCounts {
            train: 2000,
            val: 500,
            test: 1,
        }
    }
}

impl EpisodeCounts {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.train,
            Phase::Val => self.val,
            Phase::Test => self.test,
        }
    }
}

/// Class → dataset sample indices available to one phase.
pub type Pool = BTreeMap<usize, Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    /// Contiguous class ids.
    pub base: Vec<usize>,
    pub val: Vec<usize>,
    pub novel: Vec<usize>,
    pub val_mode: ValMode,
    train_pool: Pool,
    val_pool: Pool,
    test_pool: Pool,
}

impl ClassSplit {
    pub fn pool(&self, phase: Phase) -> &Pool {
        match phase {
            Phase::Train => &self.train_pool,
            Phase::Val => &self.val_pool,
            Phase::Test => &self.test_pool,
        }
    }

    /// Checks every phase partition can host episodes of shape `spec`.
    pub fn check_capacity(&self, dataset: &GraphDataset, spec: &EpisodeSpec) -> Result<()> {
        for phase in [Phase::Train, Phase::Val, Phase::Test] {
            self.check_phase(dataset, spec, phase)?;
        }
        Ok(())
    }

    pub fn check_phase(&self, dataset: &GraphDataset, spec: &EpisodeSpec, phase: Phase) -> Result<()> {
        check_pool(self.pool(phase), spec, phase, Some(dataset))
    }

    /// A split with only a novel partition, for evaluating on chosen classes.
    pub fn novel_only(dataset: &GraphDataset, novel: &[i64], spec: &EpisodeSpec) -> Result<ClassSplit> {
        let novel = resolve(dataset, novel, "novel")?;
        let by_class = dataset.indices_by_class();
        let split = ClassSplit {
            base: Vec::new(),
            val: Vec::new(),
            test_pool: novel.iter().map(|c| (*c, by_class[c].clone())).collect(),
            novel,
            val_mode: ValMode::DisjointClasses,
            train_pool: Pool::new(),
            val_pool: Pool::new(),
        };
        split.check_phase(dataset, spec, Phase::Test)?;
        Ok(split)
    }
}

fn check_pool(pool: &Pool, spec: &EpisodeSpec, phase: Phase, dataset: Option<&GraphDataset>) -> Result<()> {
    if pool.len() < spec.n_way {
        return Err(Error::Capacity(format!(
            "{phase} partition has {} classes but episodes need {}",
            pool.len(),
            spec.n_way
        )));
    }
    for (&c, samples) in pool {
        if samples.len() < spec.per_class() {
            let name = dataset.map_or(c as i64, |d| d.original_of(c));
            return Err(Error::Capacity(format!(
                "class {name} has {} {phase} samples but K+Q = {}",
                samples.len(),
                spec.per_class()
            )));
        }
    }
    Ok(())
}

fn resolve(dataset: &GraphDataset, ids: &[i64], what: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let c = dataset.class_of_original(id).ok_or_else(|| {
            Error::Split(format!("{what} class {id} does not occur in dataset `{}`", dataset.name))
        })?;
        if out.contains(&c) {
            return Err(Error::Split(format!("{what} class {id} listed twice")));
        }
        out.push(c);
    }
    Ok(out)
}

/// Validates a base/val/novel partition given in *original* label ids and
/// fixes the per-phase sample pools.
///
/// Under [`ValMode::BaseSubsample20Pct`] a stratified 20% of every base class
/// (at least one sample) is moved to the validation pool, deterministically in
/// `seed`.
pub fn make_class_split(
    dataset: &GraphDataset,
    base: &[i64],
    val: &[i64],
    novel: &[i64],
    val_mode: ValMode,
    spec: &EpisodeSpec,
) -> Result<ClassSplit> {
    let base_c = resolve(dataset, base, "base")?;
    let val_c = resolve(dataset, val, "validation")?;
    let novel_c = resolve(dataset, novel, "novel")?;
    match val_mode {
        ValMode::BaseSubsample20Pct if !val_c.is_empty() => {
            return Err(Error::Split(
                "validation classes must be empty when validating on a base subsample".into(),
            ))
        }
        ValMode::DisjointClasses if val_c.is_empty() => {
            return Err(Error::Split("disjoint-classes validation needs validation classes".into()))
        }
        _ => {}
    }
    let sets = [("base", &base_c), ("validation", &val_c), ("novel", &novel_c)];
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let a: BTreeSet<_> = sets[i].1.iter().collect();
            if let Some(c) = sets[j].1.iter().find(|c| a.contains(c)) {
                return Err(Error::Split(format!(
                    "class {} is in both the {} and {} partitions",
                    dataset.original_of(*c),
                    sets[i].0,
                    sets[j].0
                )));
            }
        }
    }

    let by_class = dataset.indices_by_class();
    let take = |classes: &[usize]| -> Pool {
        classes
            .iter()
            .map(|c| (*c, by_class.get(c).cloned().unwrap_or_default()))
            .collect()
    };
    let (train_pool, val_pool) = match val_mode {
        ValMode::DisjointClasses => (take(&base_c), take(&val_c)),
        ValMode::BaseSubsample20Pct => {
            let mut train = Pool::new();
            let mut valp = Pool::new();
            for &c in &base_c {
                let mut idx = by_class.get(&c).cloned().unwrap_or_default();
                let mut rng = stream(spec.seed, &[purpose::SPLIT, c as u64]);
                idx.shuffle(&mut rng);
                let n_val = ((idx.len() as f64 * VAL_FRACTION).round() as usize).max(1).min(idx.len());
                let mut held: Vec<usize> = idx[..n_val].to_vec();
                let mut rest: Vec<usize> = idx[n_val..].to_vec();
                held.sort_unstable();
                rest.sort_unstable();
                valp.insert(c, held);
                train.insert(c, rest);
            }
            (train, valp)
        }
    };
    let split = ClassSplit {
        base: base_c,
        val: val_c,
        novel: novel_c.clone(),
        val_mode,
        train_pool,
        val_pool,
        test_pool: take(&novel_c),
    };
    split.check_capacity(dataset, spec)?;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Contiguous class ids; position in this list is the episode-local label.
    pub classes: Vec<usize>,
    /// `supports[n]` holds the K dataset indices for `classes[n]`.
    pub supports: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
    /// Episode-local label of each query, class-major (matches [`Episode::query_indices`]).
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.supports.first().map_or(0, Vec::len)
    }

    /// Class-major flattened support indices.
    pub fn support_indices(&self) -> Vec<usize> {
        self.supports.iter().flatten().copied().collect()
    }

    /// Class-major flattened query indices.
    pub fn query_indices(&self) -> Vec<usize> {
        self.queries.iter().flatten().copied().collect()
    }
}

/// Draws N classes uniformly without replacement, then K+Q samples per
/// class without replacement: the first K become supports, the rest queries.
pub fn sample_episode(pool: &Pool, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    spec.validate()?;
    check_pool(pool, spec, Phase::Train, None).map_err(|e| match e {
        Error::Capacity(m) => Error::Capacity(m.replace("train ", "")),
        e => e,
    })?;
    let class_list: Vec<usize> = pool.keys().copied().collect();
    let chosen = index::sample(rng, class_list.len(), spec.n_way);
    let mut classes = Vec::with_capacity(spec.n_way);
    let mut supports = Vec::with_capacity(spec.n_way);
    let mut queries = Vec::with_capacity(spec.n_way);
    let mut query_labels = Vec::with_capacity(spec.n_way * spec.n_query);
    for (local, ci) in chosen.into_iter().enumerate() {
        let c = class_list[ci];
        let samples = &pool[&c];
        let picked = index::sample(rng, samples.len(), spec.per_class());
        let picked: Vec<usize> = picked.into_iter().map(|i| samples[i]).collect();
        classes.push(c);
        supports.push(picked[..spec.k_shot].to_vec());
        queries.push(picked[spec.k_shot..].to_vec());
        query_labels.extend(std::iter::repeat_n(local, spec.n_query));
    }
    Ok(Episode {
        classes,
        supports,
        queries,
        query_labels,
    })
}

/// The `index`-th episode of `phase` in `epoch`; a pure function of its key.
pub fn episode_at(split: &ClassSplit, phase: Phase, spec: &EpisodeSpec, epoch: u64, index: u64) -> Result<Episode> {
    let mut rng = stream(spec.seed, &[purpose::SAMPLE, phase.key(), epoch, index]);
    sample_episode(split.pool(phase), spec, &mut rng)
}

/// All episodes of `phase` for one epoch.
pub fn episode_stream<'a>(
    split: &'a ClassSplit,
    phase: Phase,
    spec: &'a EpisodeSpec,
    epoch: u64,
    counts: &EpisodeCounts,
) -> impl Iterator<Item = Result<Episode>> + 'a {
    (0..counts.get(phase) as u64).map(move |i| episode_at(split, phase, spec, epoch, i))
}

/// One line of the JSON-lines episode dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub phase: Phase,
    pub epoch: u64,
    pub index: u64,
    /// Original class labels.
    pub classes: Vec<i64>,
    pub supports: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
    pub query_labels: Vec<usize>,
}

impl EpisodeRecord {
    pub fn new(dataset: &GraphDataset, phase: Phase, epoch: u64, index: u64, ep: &Episode) -> Self {
        EpisodeRecord {
            phase,
            epoch,
            index,
            classes: ep.classes.iter().map(|&c| dataset.original_of(c)).collect(),
            supports: ep.supports.clone(),
            queries: ep.queries.clone(),
            query_labels: ep.query_labels.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_triangles_dataset, Graph};
    use rand::SeedableRng;

    fn balanced(n_classes: usize, per_class: usize) -> GraphDataset {
        let mut graphs = Vec::new();
        for c in 0..n_classes {
            for _ in 0..per_class {
                graphs.push((Graph::new(1, [], 0).unwrap(), c as i64 + 1));
            }
        }
        GraphDataset::from_original_labels("balanced", graphs)
    }

    fn spec(n: usize, k: usize, q: usize) -> EpisodeSpec {
        EpisodeSpec::new(n, k, q, 3).unwrap()
    }

    #[test]
    fn enzymes_style_split_is_valid() {
        let ds = balanced(6, 100);
        let s = make_class_split(&ds, &[1, 3, 5, 6], &[], &[2, 4], ValMode::BaseSubsample20Pct, &spec(2, 5, 15))
            .unwrap();
        assert_eq!(s.pool(Phase::Val).len(), 4);
        assert!(s.pool(Phase::Val).values().all(|v| v.len() == 20));
        assert!(s.pool(Phase::Train).values().all(|v| v.len() == 80));
    }

    #[test]
    fn novel_only_split_checks_just_the_test_pool() {
        let ds = balanced(3, 10);
        let s = ClassSplit::novel_only(&ds, &[1, 3], &spec(2, 3, 4)).unwrap();
        assert!(s.pool(Phase::Train).is_empty());
        assert_eq!(s.pool(Phase::Test).len(), 2);
        assert!(episode_at(&s, Phase::Test, &spec(2, 3, 4), 0, 0).is_ok());
        assert!(matches!(
            ClassSplit::novel_only(&ds, &[1, 3], &spec(2, 5, 6)),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(ClassSplit::novel_only(&ds, &[7], &spec(2, 1, 1)), Err(Error::Split(_))));
    }

    #[test]
    fn r52_style_disjoint_split_is_valid() {
        let ds = balanced(28, 20);
        let base: Vec<i64> = (1..=18).collect();
        let val: Vec<i64> = (19..=23).collect();
        let novel: Vec<i64> = (24..=28).collect();
        let s = make_class_split(&ds, &base, &val, &novel, ValMode::DisjointClasses, &spec(2, 5, 15)).unwrap();
        assert_eq!((s.base.len(), s.val.len(), s.novel.len()), (18, 5, 5));
    }

    #[test]
    fn overlapping_partitions_are_rejected() {
        let ds = balanced(3, 30);
        let err = make_class_split(&ds, &[1, 2], &[3], &[2, 3], ValMode::DisjointClasses, &spec(2, 1, 1))
            .unwrap_err();
        assert!(matches!(err, Error::Split(_)), "{err}");
    }

    #[test]
    fn small_class_is_a_capacity_error_naming_it() {
        let mut ds = balanced(4, 30);
        ds.graphs.truncate(30 * 3 + 4);
        let err = make_class_split(&ds, &[1, 2], &[], &[3, 4], ValMode::BaseSubsample20Pct, &spec(2, 2, 3))
            .unwrap_err();
        assert!(matches!(&err, Error::Capacity(m) if m.contains("class 4")), "{err}");
    }

    #[test]
    fn unknown_class_is_a_split_error() {
        let ds = balanced(3, 30);
        assert!(make_class_split(&ds, &[1, 9], &[], &[3], ValMode::BaseSubsample20Pct, &spec(2, 1, 1)).is_err());
    }

    #[test]
    fn three_way_five_shot_shape() {
        let ds = balanced(7, 40);
        let pool: Pool = ds.indices_by_class();
        let mut rng = Rng::seed_from_u64(1);
        let ep = sample_episode(&pool, &spec(3, 5, 15), &mut rng).unwrap();
        assert_eq!(ep.support_indices().len(), 15);
        assert_eq!(ep.query_indices().len(), 45);
        assert_eq!(ep.query_labels.len(), 45);
    }

    #[test]
    fn exact_capacity_uses_every_sample_once() {
        let ds = balanced(2, 4);
        let pool = ds.indices_by_class();
        let mut rng = Rng::seed_from_u64(5);
        let ep = sample_episode(&pool, &spec(2, 1, 3), &mut rng).unwrap();
        let mut all: Vec<usize> = ep.support_indices();
        all.extend(ep.query_indices());
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn insufficient_pool_is_a_capacity_error() {
        let ds = balanced(2, 4);
        let pool = ds.indices_by_class();
        let mut rng = Rng::seed_from_u64(5);
        assert!(matches!(
            sample_episode(&pool, &spec(3, 1, 1), &mut rng),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            sample_episode(&pool, &spec(2, 2, 3), &mut rng),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn streams_have_requested_lengths_and_vary_by_epoch() {
        let ds = generate_triangles_dataset(10, 30, 0).unwrap();
        let sp = spec(3, 2, 3);
        let split = make_class_split(&ds, &[1, 2, 3, 4, 5, 6, 7], &[], &[8, 9, 10], ValMode::BaseSubsample20Pct, &sp)
            .unwrap();
        let counts = EpisodeCounts {
            train: 4,
            val: 2,
            test: 1,
        };
        let lens: Vec<usize> = [Phase::Train, Phase::Val, Phase::Test]
            .iter()
            .map(|&p| episode_stream(&split, p, &sp, 0, &counts).count())
            .collect();
        assert_eq!(lens, vec![4, 2, 1]);
        let e0: Vec<_> = episode_stream(&split, Phase::Train, &sp, 0, &counts).collect::<Result<_>>().unwrap();
        let e1: Vec<_> = episode_stream(&split, Phase::Train, &sp, 1, &counts).collect::<Result<_>>().unwrap();
        let again: Vec<_> = episode_stream(&split, Phase::Train, &sp, 0, &counts).collect::<Result<_>>().unwrap();
        assert_ne!(e0, e1);
        assert_eq!(e0, again);
        assert_eq!(EpisodeCounts::default().val, 500);
    }
}
