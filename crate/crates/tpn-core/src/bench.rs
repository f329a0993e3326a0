//! Evaluation, baselines, and sweeps.
//!
//! All evaluators share the reporting shape: E episodes, per-episode query
//! accuracy, the mean, and a 95% confidence half-width of
//! `1.96 * std / sqrt(E)`. Episode `i` of a run always draws from random
//! stream `(Eval, i)`, so reports are identical regardless of how many
//! rayon workers execute them.
//!
//! Two baselines calibrate the transductive gain. `prototype` classifies
//! each query by its nearest class mean; `fixed_sigma_lp` runs the same
//! label propagation as the model but with one shared length-scale,
//! defaulting to the median pairwise distance of the episode (there is no
//! principled way to tune a fixed scale, so the heuristic is logged).
//! Both run in the trained embedding when a checkpoint is supplied and in
//! raw input space otherwise.
//!
//! Semi-supervised evaluation follows the convention of averaging over 10
//! labeled/unlabeled splits; the split-level standard error is reported
//! alongside the pooled episode CI.

use crate::episodes::{partition_pools, sample_episode, sample_semi_episode, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::build_graph;
use crate::networks::{flatten, ModelVars};
use crate::propagation::{classify_semi, propagate_closed, LabelMatrix};
use crate::rng::{stream, StreamKind};
use crate::tensor::{Tape, Tensor};
use crate::training::{train, Checkpoint, TrainConfig};
use rayon::prelude::*;
use std::time::Instant;

/// Number of labeled/unlabeled splits averaged by [`semi_eval`].
pub const SEMI_SPLITS: usize = 10;

/// Accuracy report over a batch of evaluation episodes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tag: String,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per episode (total, balanced over classes).
    pub t_query: usize,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
    pub mean: f64,
    /// 95% CI half-width: `1.96 * std(per_episode) / sqrt(episodes)`.
    pub ci95: f64,
    /// Wall-clock seconds; reports omit it by default so output stays
    /// byte-deterministic.
    pub seconds: f64,
    /// Standard error over split means, present for semi-supervised runs.
    pub split_stderr: Option<f64>,
    /// Human-readable remarks (heuristic values and the like).
    pub notes: Vec<String>,
}

/// Header row shared by every report CSV.
pub const CSV_HEADER: &str = "tag,n_way,k_shot,query,episodes,mean_acc,ci95,seconds";

fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    fn from_accuracies(
        tag: &str,
        n_way: usize,
        k_shot: usize,
        t_query: usize,
        per_episode: Vec<f64>,
        seconds: f64,
    ) -> Self {
        let (mean, std) = mean_and_std(&per_episode);
        let ci95 = 1.96 * std / (per_episode.len() as f64).sqrt();
        EvalReport {
            tag: tag.to_string(),
            n_way,
            k_shot,
            t_query,
            episodes: per_episode.len(),
            per_episode,
            mean,
            ci95,
            seconds,
            split_stderr: None,
            notes: Vec::new(),
        }
    }

    /// True when the other report's mean lies within this report's 95%
    /// confidence interval or vice versa.
    pub fn ci_overlaps(&self, other: &EvalReport) -> bool {
        (self.mean - other.mean).abs() <= self.ci95 + other.ci95
    }

    /// One [`CSV_HEADER`] row. The query column counts queries per class.
    /// Wall time is reported as 0.000 unless `timing` is set, keeping the
    /// default output byte-deterministic.
    pub fn csv_row(&self, timing: bool) -> String {
        let seconds = if timing { format!("{:.3}", self.seconds) } else { "0.000".to_string() };
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.tag,
            self.n_way,
            self.k_shot,
            self.t_query / self.n_way,
            self.episodes,
            self.mean,
            self.ci95,
            seconds
        )
    }
}

fn check_compat(ck: &Checkpoint, ds: &Dataset) -> Result<TrainConfig> {
    let cfg = ck.config()?;
    let shape = cfg.variant.example_shape();
    if ds.example_shape != shape {
        return Err(Error::Config(format!(
            "checkpoint embedding expects examples of shape {shape:?}, dataset has {:?}",
            ds.example_shape
        )));
    }
    Ok(cfg)
}

/// Embeds a raw batch with the checkpoint's networks, returning the
/// flattened `[n, d]` feature matrix.
fn embed_batch(ck: &Checkpoint, batch: &Tensor) -> Result<(Vec<f64>, usize)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(batch);
    let vars = ModelVars::stage(&mut tape, &ck.params);
    let f = vars.embed(&mut tape, xv)?;
    let flat = flatten(&mut tape, f)?;
    let d = tape.shape(flat)[1];
    Ok((tape.value(flat).to_vec(), d))
}

/// Evaluates the transductive model: E episodes of joint closed-form
/// propagation, query-row accuracy each. Deterministic given `seed`.
pub fn eval(
    ck: &Checkpoint,
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let cfg = check_compat(ck, ds)?;
    eval_with(ck, ds, n_way, k_shot, t_query, episodes, seed, cfg.alpha, cfg.k_graph, "tpn")
}

/// [`eval`] with explicit propagation settings, for sweeps over test-time
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn eval_with(
    ck: &Checkpoint,
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    episodes: usize,
    seed: u64,
    alpha: f64,
    k_graph: usize,
    tag: &str,
) -> Result<EvalReport> {
    check_compat(ck, ds)?;
    if episodes == 0 {
        return Err(Error::InvalidArg {
            op: "eval",
            msg: "episode count must be positive".to_string(),
        });
    }
    let start = Instant::now();
    let accs: Result<Vec<f64>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, StreamKind::Eval, i as u64);
            let ep = sample_episode(ds, n_way, k_shot, t_query, &mut rng)?;
            let batch = ep.batch(&ds.example_shape)?;
            let lm = ep.label_matrix()?;
            let mut tape = Tape::new();
            let xv = tape.leaf(&batch);
            let vars = ModelVars::stage(&mut tape, &ck.params);
            let g = crate::graph::build_from_model(&mut tape, &vars, xv, k_graph)?;
            let result = propagate_closed(&mut tape, g.s_norm, &lm, alpha)?;
            let ns = n_way * k_shot;
            let correct =
                result.preds[ns..].iter().zip(&ep.query_y).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / t_query as f64)
        })
        .collect();
    Ok(EvalReport::from_accuracies(
        tag,
        n_way,
        k_shot,
        t_query,
        accs?,
        start.elapsed().as_secs_f64(),
    ))
}

/// Heuristic-or-learned-free baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Label propagation with one shared length-scale for all examples.
    FixedSigmaLp,
    /// Nearest class mean in feature space.
    Prototype,
}

impl BaselineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::FixedSigmaLp => "fixed_sigma_lp",
            BaselineKind::Prototype => "prototype",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_sigma_lp" => Ok(BaselineKind::FixedSigmaLp),
            "prototype" => Ok(BaselineKind::Prototype),
            other => Err(Error::Config(format!(
                "unknown baseline {other:?}, expected fixed_sigma_lp or prototype"
            ))),
        }
    }
}

/// Median pairwise Euclidean distance between feature rows, floored away
/// from zero so it can serve as a length-scale.
fn median_pairwise_distance(f: &[f64], n: usize, d: usize) -> f64 {
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..d {
                let diff = f[i * d + c] - f[j * d + c];
                s += diff * diff;
            }
            dists.push(s.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median =
        if dists.len() % 2 == 1 { dists[mid] } else { 0.5 * (dists[mid - 1] + dists[mid]) };
    median.max(0.01)
}

fn prototype_accuracy(f: &[f64], d: usize, n_way: usize, k_shot: usize, query_y: &[usize]) -> f64 {
    let ns = n_way * k_shot;
    let mut means = vec![0.0; n_way * d];
    for s in 0..ns {
        let class = s / k_shot;
        for c in 0..d {
            means[class * d + c] += f[s * d + c] / k_shot as f64;
        }
    }
    let mut correct = 0usize;
    for (q, &y) in query_y.iter().enumerate() {
        let row = &f[(ns + q) * d..(ns + q + 1) * d];
        let pred = (0..n_way)
            .min_by(|&a, &b| {
                let da: f64 =
                    means[a * d..(a + 1) * d].iter().zip(row).map(|(m, x)| (m - x).powi(2)).sum();
                let db: f64 =
                    means[b * d..(b + 1) * d].iter().zip(row).map(|(m, x)| (m - x).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / query_y.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn fixed_sigma_lp_accuracy(
    f: Vec<f64>,
    n: usize,
    d: usize,
    sigma: f64,
    k_graph: usize,
    alpha: f64,
    lm: &LabelMatrix,
    query_y: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let fv = tape.constant(vec![n, d], f)?;
    let sv = tape.constant(vec![n], vec![sigma; n])?;
    let g = build_graph(&mut tape, fv, sv, k_graph)?;
    let result = propagate_closed(&mut tape, g.s_norm, lm, alpha)?;
    let ns = n - query_y.len();
    let correct = result.preds[ns..].iter().zip(query_y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / query_y.len() as f64)
}

/// Evaluates a baseline under the same episode stream as [`eval`]. With a
/// checkpoint the baseline sees the trained embedding; without one it
/// sees raw inputs. `sigma` overrides the per-episode median heuristic of
/// the propagation baseline.
#[allow(clippy::too_many_arguments)]
pub fn eval_baseline(
    kind: BaselineKind,
    ck: Option<&Checkpoint>,
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    episodes: usize,
    seed: u64,
    alpha: f64,
    k_graph: usize,
    sigma: Option<f64>,
) -> Result<EvalReport> {
    if let Some(ck) = ck {
        check_compat(ck, ds)?;
    }
    if episodes == 0 {
        return Err(Error::InvalidArg {
            op: "eval_baseline",
            msg: "episode count must be positive".to_string(),
        });
    }
    let start = Instant::now();
    let raw_d = ds.example_len();
    let results: Result<Vec<(f64, f64)>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, StreamKind::Eval, i as u64);
            let ep = sample_episode(ds, n_way, k_shot, t_query, &mut rng)?;
            let batch = ep.batch(&ds.example_shape)?;
            let n = ep.union_size();
            let (f, d) = match ck {
                Some(ck) => embed_batch(ck, &batch)?,
                None => (batch.data.clone(), raw_d),
            };
            match kind {
                BaselineKind::Prototype => {
                    Ok((prototype_accuracy(&f, d, n_way, k_shot, &ep.query_y), 0.0))
                }
                BaselineKind::FixedSigmaLp => {
                    let s = sigma.unwrap_or_else(|| median_pairwise_distance(&f, n, d));
                    let lm = ep.label_matrix()?;
                    let acc =
                        fixed_sigma_lp_accuracy(f, n, d, s, k_graph, alpha, &lm, &ep.query_y)?;
                    Ok((acc, s))
                }
            }
        })
        .collect();
    let results = results?;
    let accs: Vec<f64> = results.iter().map(|(a, _)| *a).collect();
    let mut report = EvalReport::from_accuracies(
        kind.as_str(),
        n_way,
        k_shot,
        t_query,
        accs,
        start.elapsed().as_secs_f64(),
    );
    if kind == BaselineKind::FixedSigmaLp {
        let mut sigmas: Vec<f64> = results.iter().map(|(_, s)| *s).collect();
        sigmas.sort_by(f64::total_cmp);
        let median = sigmas[sigmas.len() / 2];
        report.notes.push(match sigma {
            Some(s) => format!("sigma fixed at {s}"),
            None => format!(
                "sigma from median pairwise distance per episode; median over episodes {median:.6}"
            ),
        });
    }
    Ok(report)
}

/// Semi-supervised evaluation: for each of [`SEMI_SPLITS`] labeled/
/// unlabeled partitions, runs `episodes` episodes where every query is
/// classified by per-query propagation over support, pool, and the query
/// itself. Reports pooled episode statistics plus the standard error over
/// split means.
#[allow(clippy::too_many_arguments)]
pub fn semi_eval(
    ck: &Checkpoint,
    ds: &Dataset,
    labeled_ratio: f64,
    m_pool: usize,
    distractor_count: usize,
    n_way: usize,
    k_shot: usize,
    t_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let cfg = check_compat(ck, ds)?;
    if episodes == 0 {
        return Err(Error::InvalidArg {
            op: "semi_eval",
            msg: "episode count must be positive".to_string(),
        });
    }
    let start = Instant::now();
    let partitions: Result<Vec<_>> = (0..SEMI_SPLITS)
        .map(|s| {
            let mut rng = stream(seed, StreamKind::Partition, s as u64);
            partition_pools(ds, labeled_ratio, &mut rng)
        })
        .collect();
    let partitions = partitions?;

    let accs: Result<Vec<f64>> = (0..SEMI_SPLITS * episodes)
        .into_par_iter()
        .map(|idx| {
            let split = idx / episodes;
            let mut rng = stream(seed, StreamKind::Eval, idx as u64);
            let se = sample_semi_episode(
                ds,
                &partitions[split],
                n_way,
                k_shot,
                t_query,
                m_pool,
                distractor_count,
                &mut rng,
            )?;
            let ep = &se.episode;
            let mut correct = 0usize;
            for (q, &y) in ep.query_y.iter().enumerate() {
                let pred = classify_semi(
                    &ck.params,
                    &ep.support_x,
                    &ep.support_y,
                    &se.pool_x,
                    &ep.query_x[q],
                    n_way,
                    cfg.k_graph,
                    cfg.alpha,
                )?;
                if pred == y {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ep.query_y.len() as f64)
        })
        .collect();
    let accs = accs?;

    let split_means: Vec<f64> = (0..SEMI_SPLITS)
        .map(|s| accs[s * episodes..(s + 1) * episodes].iter().sum::<f64>() / episodes as f64)
        .collect();
    let (_, split_std) = mean_and_std(&split_means);
    let mut report = EvalReport::from_accuracies(
        "tpn_semi",
        n_way,
        k_shot,
        t_query,
        accs,
        start.elapsed().as_secs_f64(),
    );
    report.split_stderr = Some(split_std / (SEMI_SPLITS as f64).sqrt());
    report.notes.push(format!(
        "averaged over {SEMI_SPLITS} labeled/unlabeled splits, ratio {labeled_ratio}, \
         pool {m_pool}, distractor classes {distractor_count}"
    ));
    Ok(report)
}

/// Sweepable hyperparameters. Query count and training shot retrain the
/// model per value; propagation parameters re-evaluate the base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Queries per class, at training and evaluation time (retrains).
    Query,
    /// Propagation mixing coefficient (eval-only).
    Alpha,
    /// Neighbors kept per graph row (eval-only).
    KGraph,
    /// Support shots per training episode (retrains).
    TrainShot,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Query => "query",
            SweepParam::Alpha => "alpha",
            SweepParam::KGraph => "k_graph",
            SweepParam::TrainShot => "train_shot",
        }
    }

    fn retrains(&self) -> bool {
        matches!(self, SweepParam::Query | SweepParam::TrainShot)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(SweepParam::Query),
            "alpha" => Ok(SweepParam::Alpha),
            "k_graph" => Ok(SweepParam::KGraph),
            "train_shot" => Ok(SweepParam::TrainShot),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; valid: query, alpha, k_graph, train_shot"
            ))),
        }
    }
}

/// One sweep result row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub report: EvalReport,
}

fn integral(param: SweepParam, value: f64) -> Result<usize> {
    if value.fract() != 0.0 || value < 1.0 {
        return Err(Error::Config(format!(
            "{} sweep needs positive integers, got {value}",
            param.as_str()
        )));
    }
    Ok(value as usize)
}

/// Trains (when required) and evaluates the base configuration once per
/// value. Training uses the dataset's train split, evaluation its test
/// split.
pub fn sweep(
    ds: &Dataset,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".to_string()));
    }
    base.validate()?;
    let train_ds = ds.restricted(Some(Split::Train));
    let test_ds = ds.restricted(Some(Split::Test));

    let base_ck = if param.retrains() {
        None
    } else {
        Some(train(&train_ds, base, None, None, &mut |_| {})?)
    };

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let row = match param {
            SweepParam::Alpha => {
                if !(value > 0.0 && value < 1.0) {
                    return Err(Error::Config(format!(
                        "alpha sweep values must lie in (0, 1), got {value}"
                    )));
                }
                let ck = base_ck.as_ref().unwrap();
                eval_with(
                    ck,
                    &test_ds,
                    base.n_way,
                    base.k_test,
                    base.t_query,
                    episodes,
                    eval_seed,
                    value,
                    base.k_graph,
                    "tpn",
                )?
            }
            SweepParam::KGraph => {
                let k = integral(param, value)?;
                let ck = base_ck.as_ref().unwrap();
                eval_with(
                    ck,
                    &test_ds,
                    base.n_way,
                    base.k_test,
                    base.t_query,
                    episodes,
                    eval_seed,
                    base.alpha,
                    k,
                    "tpn",
                )?
            }
            SweepParam::Query => {
                let per_class = integral(param, value)?;
                let cfg = TrainConfig { t_query: per_class * base.n_way, ..base.clone() };
                let ck = train(&train_ds, &cfg, None, None, &mut |_| {})?;
                eval(&ck, &test_ds, cfg.n_way, cfg.k_test, cfg.t_query, episodes, eval_seed)?
            }
            SweepParam::TrainShot => {
                let k_train = integral(param, value)?;
                let cfg = TrainConfig { k_train, ..base.clone() };
                let ck = train(&train_ds, &cfg, None, None, &mut |_| {})?;
                eval(&ck, &test_ds, cfg.n_way, cfg.k_test, cfg.t_query, episodes, eval_seed)?
            }
        };
        rows.push(SweepRow { param: param.as_str(), value, report: row });
    }
    Ok(rows)
}
