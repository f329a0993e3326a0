//! Datasets and episodic samplers.
//!
//! A [`Dataset`] is an immutable bag of classes, each holding fixed-shape
//! examples and a train/val/test tag. Episodes are drawn from it by pure
//! functions of `(dataset, sizes, rng)`: the i-th episode of a run always
//! reads random stream `(kind, i)`, so sampling is reproducible and safe to
//! parallelize with disjoint stream indices.
//!
//! Semi-supervised evaluation first fixes a per-class labeled/unlabeled
//! partition for the whole run, then draws support and query rows from the
//! labeled side and the unlabeled pool from the other, optionally from
//! distractor classes outside the episode.

pub mod fsds;
pub mod synthetic;

pub use fsds::{load_fsds, save_fsds};
pub use synthetic::{gen_synthetic, SyntheticKind};

use crate::error::{Error, Result};
use crate::propagation::LabelMatrix;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// Which partition of the class universe a class belongs to. Episodic
/// training never mixes splits: meta-train classes are disjoint from the
/// classes used at meta-test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => {
                Err(Error::Config(format!("unknown split {other:?}, expected train, val or test")))
            }
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One class: a name, a split tag, and its examples (flattened rows of
/// `example_len` values each).
#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub id: u32,
    pub name: String,
    pub split: Split,
    pub examples: Vec<Vec<f64>>,
}

/// Immutable dataset: classes over a single shared example shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub example_shape: Vec<usize>,
    pub classes: Vec<ClassRecord>,
}

impl Dataset {
    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    /// Returns a dataset containing only the classes of the given split,
    /// or all classes when `split` is `None`.
    pub fn restricted(&self, split: Option<Split>) -> Dataset {
        let classes =
            self.classes.iter().filter(|c| split.is_none_or(|s| c.split == s)).cloned().collect();
        Dataset { example_shape: self.example_shape.clone(), classes }
    }

    /// Checks structural invariants: unique names and ids, consistent
    /// example lengths, at least one example per class.
    pub fn validate(&self) -> Result<()> {
        let len = self.example_len();
        if len == 0 {
            return Err(Error::Dataset("example shape has zero volume".to_string()));
        }
        let mut names = std::collections::HashSet::new();
        let mut ids = std::collections::HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Dataset(format!("duplicate class name {:?}", c.name)));
            }
            if !ids.insert(c.id) {
                return Err(Error::Dataset(format!("duplicate class id {}", c.id)));
            }
            if c.examples.is_empty() {
                return Err(Error::Dataset(format!("class {:?} has no examples", c.name)));
            }
            for (i, ex) in c.examples.iter().enumerate() {
                if ex.len() != len {
                    return Err(Error::Dataset(format!(
                        "class {:?} example {i} has {} values, shape {:?} needs {len}",
                        c.name,
                        ex.len(),
                        self.example_shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One N-way K-shot task: a labeled support set and a held-out query set
/// over the same N classes. Episode labels live in `[0, N)`; `class_map`
/// translates them back to dataset class ids.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub support_x: Vec<Vec<f64>>,
    pub support_y: Vec<usize>,
    pub query_x: Vec<Vec<f64>>,
    pub query_y: Vec<usize>,
    pub class_map: Vec<u32>,
}

impl Episode {
    /// Total node count of the episode graph (support plus query).
    pub fn union_size(&self) -> usize {
        self.support_x.len() + self.query_x.len()
    }

    /// Stacks support rows then query rows into one `[n, ...shape]` batch.
    pub fn batch(&self, example_shape: &[usize]) -> Result<Tensor> {
        let n = self.union_size();
        let mut shape = vec![n];
        shape.extend_from_slice(example_shape);
        let mut data = Vec::with_capacity(n * example_shape.iter().product::<usize>());
        for row in self.support_x.iter().chain(self.query_x.iter()) {
            data.extend_from_slice(row);
        }
        Tensor::new(shape, data)
    }

    /// Label matrix matching [`Episode::batch`] row order: support rows
    /// carry one-hot labels, query rows are unlabeled but keep ground truth
    /// for scoring.
    pub fn label_matrix(&self) -> Result<LabelMatrix> {
        let n = self.union_size();
        let ns = self.support_x.len();
        let mut mask = vec![false; n];
        let mut truth = vec![None; n];
        for i in 0..ns {
            mask[i] = true;
            truth[i] = Some(self.support_y[i]);
        }
        for (i, &y) in self.query_y.iter().enumerate() {
            truth[ns + i] = Some(y);
        }
        LabelMatrix::new(mask, truth, self.n_way)
    }
}

/// An [`Episode`] plus an unlabeled pool whose labels are hidden from the
/// classifier. `pool_class` keeps the true dataset class ids for
/// diagnostics only; inference never reads it.
#[derive(Debug, Clone)]
pub struct SemiEpisode {
    pub episode: Episode,
    pub pool_x: Vec<Vec<f64>>,
    pub pool_class: Vec<u32>,
    pub distractor: bool,
}

/// Run-level labeled/unlabeled split for semi-supervised evaluation,
/// indexed parallel to `Dataset::classes`. Fixed once per run so every
/// episode of the run sees the same partition.
#[derive(Debug, Clone)]
pub struct PoolPartition {
    pub labeled: Vec<Vec<usize>>,
    pub unlabeled: Vec<Vec<usize>>,
}

fn check_episode_sizes(op: &'static str, n: usize, k: usize, t: usize) -> Result<usize> {
    if n < 2 || k == 0 || t == 0 {
        return Err(Error::InvalidArg {
            op,
            msg: format!("need n_way >= 2, k_shot >= 1, queries >= 1; got N={n} K={k} T={t}"),
        });
    }
    if !t.is_multiple_of(n) {
        return Err(Error::InvalidArg {
            op,
            msg: format!("query count {t} must divide evenly over {n} classes"),
        });
    }
    Ok(t / n)
}

/// Draws one N-way K-shot episode with `t` total queries (balanced per
/// class). Classes and instances are chosen uniformly without replacement;
/// the draw is fully determined by the generator state.
pub fn sample_episode(
    ds: &Dataset,
    n: usize,
    k: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let per_class_q = check_episode_sizes("sample_episode", n, k, t)?;
    let need = k + per_class_q;
    let eligible: Vec<usize> =
        (0..ds.classes.len()).filter(|&c| ds.classes[c].examples.len() >= need).collect();
    if eligible.len() < n {
        return Err(Error::Dataset(format!(
            "need {n} classes with at least {need} examples, only {} qualify",
            eligible.len()
        )));
    }
    let chosen = sample(rng, eligible.len(), n);
    let mut ep = Episode {
        n_way: n,
        k_shot: k,
        n_query: t,
        support_x: Vec::with_capacity(n * k),
        support_y: Vec::with_capacity(n * k),
        query_x: Vec::with_capacity(t),
        query_y: Vec::with_capacity(t),
        class_map: Vec::with_capacity(n),
    };
    let mut queries: Vec<(Vec<f64>, usize)> = Vec::with_capacity(t);
    for (label, pick) in chosen.iter().enumerate() {
        let class = &ds.classes[eligible[pick]];
        ep.class_map.push(class.id);
        let rows = sample(rng, class.examples.len(), need);
        for (j, row) in rows.iter().enumerate() {
            if j < k {
                ep.support_x.push(class.examples[row].clone());
                ep.support_y.push(label);
            } else {
                queries.push((class.examples[row].clone(), label));
            }
        }
    }
    for (x, y) in queries {
        ep.query_x.push(x);
        ep.query_y.push(y);
    }
    Ok(ep)
}

/// Splits every class's example indices into labeled and unlabeled pools
/// with the given labeled fraction. The shuffle comes from `rng`, so one
/// `Partition` stream index yields one reproducible split.
pub fn partition_pools(
    ds: &Dataset,
    labeled_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoolPartition> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::InvalidArg {
            op: "partition_pools",
            msg: format!("labeled_ratio must lie in (0, 1], got {labeled_ratio}"),
        });
    }
    let mut labeled = Vec::with_capacity(ds.classes.len());
    let mut unlabeled = Vec::with_capacity(ds.classes.len());
    for class in &ds.classes {
        let len = class.examples.len();
        let perm = sample(rng, len, len).into_vec();
        let n_labeled = ((labeled_ratio * len as f64).round() as usize).clamp(1, len);
        let mut lab: Vec<usize> = perm[..n_labeled].to_vec();
        let mut unl: Vec<usize> = perm[n_labeled..].to_vec();
        lab.sort_unstable();
        unl.sort_unstable();
        labeled.push(lab);
        unlabeled.push(unl);
    }
    Ok(PoolPartition { labeled, unlabeled })
}

/// Draws a semi-supervised episode: support and query rows from the
/// labeled pools of `n` classes, plus `m` unlabeled pool examples. With
/// `distractor_count > 0` the pool comes from that many classes outside
/// the episode; otherwise it comes from the episode classes themselves.
#[allow(clippy::too_many_arguments)]
pub fn sample_semi_episode(
    ds: &Dataset,
    part: &PoolPartition,
    n: usize,
    k: usize,
    t: usize,
    m: usize,
    distractor_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SemiEpisode> {
    let per_class_q = check_episode_sizes("sample_semi_episode", n, k, t)?;
    if part.labeled.len() != ds.classes.len() {
        return Err(Error::InvalidArg {
            op: "sample_semi_episode",
            msg: format!(
                "partition covers {} classes, dataset has {}",
                part.labeled.len(),
                ds.classes.len()
            ),
        });
    }
    let need = k + per_class_q;
    let eligible: Vec<usize> =
        (0..ds.classes.len()).filter(|&c| part.labeled[c].len() >= need).collect();
    if eligible.len() < n {
        return Err(Error::Dataset(format!(
            "need {n} classes with at least {need} labeled examples, only {} qualify",
            eligible.len()
        )));
    }
    let chosen = sample(rng, eligible.len(), n);
    let episode_classes: Vec<usize> = chosen.iter().map(|p| eligible[p]).collect();

    let mut ep = Episode {
        n_way: n,
        k_shot: k,
        n_query: t,
        support_x: Vec::with_capacity(n * k),
        support_y: Vec::with_capacity(n * k),
        query_x: Vec::with_capacity(t),
        query_y: Vec::with_capacity(t),
        class_map: Vec::with_capacity(n),
    };
    let mut queries: Vec<(Vec<f64>, usize)> = Vec::with_capacity(t);
    for (label, &c) in episode_classes.iter().enumerate() {
        let class = &ds.classes[c];
        ep.class_map.push(class.id);
        let pool = &part.labeled[c];
        let rows = sample(rng, pool.len(), need);
        for (j, row) in rows.iter().enumerate() {
            let x = class.examples[pool[row]].clone();
            if j < k {
                ep.support_x.push(x);
                ep.support_y.push(label);
            } else {
                queries.push((x, label));
            }
        }
    }
    for (x, y) in queries {
        ep.query_x.push(x);
        ep.query_y.push(y);
    }

    let sources: Vec<usize> = if distractor_count > 0 {
        let outside: Vec<usize> =
            (0..ds.classes.len()).filter(|c| !episode_classes.contains(c)).collect();
        if outside.len() < distractor_count {
            return Err(Error::Dataset(format!(
                "asked for {distractor_count} distractor classes, only {} classes \
                 outside the episode",
                outside.len()
            )));
        }
        sample(rng, outside.len(), distractor_count).iter().map(|p| outside[p]).collect()
    } else {
        episode_classes.clone()
    };

    let mut pools: Vec<Vec<usize>> = sources
        .iter()
        .map(|&c| {
            let unl = &part.unlabeled[c];
            sample(rng, unl.len(), unl.len()).iter().map(|p| unl[p]).collect()
        })
        .collect();
    let mut pool_x = Vec::with_capacity(m);
    let mut pool_class = Vec::with_capacity(m);
    for i in 0..m {
        let s = i % sources.len();
        let c = sources[s];
        let Some(row) = pools[s].pop() else {
            return Err(Error::Dataset(format!(
                "unlabeled pool of class {:?} exhausted after {} of {m} pool draws",
                ds.classes[c].name, i
            )));
        };
        pool_x.push(ds.classes[c].examples[row].clone());
        pool_class.push(ds.classes[c].id);
    }

    Ok(SemiEpisode { episode: ep, pool_x, pool_class, distractor: distractor_count > 0 })
}
