//! Label propagation and the episodic meta-loss.
//!
//! Labels enter as a one-hot matrix `Y` with one row per graph node:
//! support rows carry their class, every other row is zero. The closed form
//! solves `(I - alpha S) F* = Y` through the differentiable linear solve;
//! the iterative form applies `F_{t+1} = alpha S F_t + (1 - alpha) Y`
//! literally, starting from `F_0 = Y`. The two are intentionally not equal:
//! the iteration converges to `(1 - alpha) F*`, a positive rescaling that
//! preserves every argmax. Training uses the closed form.
//!
//! The episode loss is row-wise softmax cross-entropy over either the union
//! of support and query rows (default) or the query rows alone.

use crate::error::{Error, Result};
use crate::graph::build_from_model;
use crate::networks::{ModelParams, ModelVars};
use crate::tensor::{Tape, Tensor, Var};

/// One-hot propagation sources plus ground truth for loss computation.
#[derive(Debug, Clone)]
pub struct LabelMatrix {
    /// Node count.
    pub n: usize,
    /// Class count of the episode.
    pub n_classes: usize,
    /// Row-major `n x n_classes`; one-hot on support rows, zero elsewhere.
    pub y: Vec<f64>,
    /// True for support rows.
    pub support_mask: Vec<bool>,
    /// Ground truth where known; `None` marks rows that are never scored
    /// (e.g. unlabeled pool points at inference).
    pub true_labels: Vec<Option<usize>>,
}

impl LabelMatrix {
    /// Builds the matrix from a support mask and per-row labels. Support
    /// rows must carry a label below `n_classes`.
    pub fn new(
        support_mask: Vec<bool>,
        true_labels: Vec<Option<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if support_mask.len() != true_labels.len() {
            return Err(Error::InvalidArg {
                op: "LabelMatrix::new",
                msg: format!(
                    "support mask ({}) and labels ({}) disagree on length",
                    support_mask.len(),
                    true_labels.len()
                ),
            });
        }
        if n_classes == 0 {
            return Err(Error::InvalidArg {
                op: "LabelMatrix::new",
                msg: "n_classes must be positive".to_string(),
            });
        }
        let n = support_mask.len();
        let mut y = vec![0.0; n * n_classes];
        for i in 0..n {
            if !support_mask[i] {
                continue;
            }
            match true_labels[i] {
                Some(l) if l < n_classes => y[i * n_classes + l] = 1.0,
                Some(l) => {
                    return Err(Error::Dataset(format!(
                        "support row {i} labeled {l}, beyond {n_classes} classes"
                    )))
                }
                None => {
                    return Err(Error::Dataset(format!("support row {i} has no label")));
                }
            }
        }
        Ok(LabelMatrix { n, n_classes, y, support_mask, true_labels })
    }

    pub fn support_count(&self) -> usize {
        self.support_mask.iter().filter(|&&m| m).count()
    }
}

/// Propagated scores with derived predictions.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    /// Tape handle to the `n x n_classes` score matrix.
    pub f_star: Var,
    /// Row-wise softmax of the scores.
    pub probs: Vec<f64>,
    /// Row argmax; ties resolve to the lowest class index.
    pub preds: Vec<usize>,
    pub alpha: f64,
}

/// Row scope of the episode loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    /// Support and query rows together (the default).
    Union,
    /// Query rows only.
    QueryOnly,
}

impl std::str::FromStr for LossScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(LossScope::Union),
            "query_only" => Ok(LossScope::QueryOnly),
            other => Err(Error::Config(format!(
                "unknown loss scope {other:?}, expected union or query_only"
            ))),
        }
    }
}

impl std::fmt::Display for LossScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossScope::Union => write!(f, "union"),
            LossScope::QueryOnly => write!(f, "query_only"),
        }
    }
}

fn check_alpha(op: &'static str, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArg {
            op,
            msg: format!("alpha must lie in (0, 1), got {alpha}"),
        });
    }
    Ok(())
}

fn check_node_count(
    op: &'static str,
    tape: &Tape,
    s_norm: Var,
    labels: &LabelMatrix,
) -> Result<usize> {
    let shape = tape.shape(s_norm);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidArg {
            op,
            msg: format!("S must be square, got shape {shape:?}"),
        });
    }
    if shape[0] != labels.n {
        return Err(Error::DimMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![labels.n, labels.n_classes],
        });
    }
    Ok(shape[0])
}

fn result_from(tape: &Tape, f_star: Var, alpha: f64, n_classes: usize) -> PropagationResult {
    let v = tape.value(f_star);
    let n = v.len() / n_classes;
    let mut probs = vec![0.0; v.len()];
    let mut preds = vec![0usize; n];
    for i in 0..n {
        let row = &v[i * n_classes..(i + 1) * n_classes];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for j in 0..n_classes {
            let e = (row[j] - mx).exp();
            probs[i * n_classes + j] = e;
            denom += e;
        }
        let mut best = 0usize;
        for j in 0..n_classes {
            probs[i * n_classes + j] /= denom;
            if row[j] > row[best] {
                best = j;
            }
        }
        preds[i] = best;
    }
    PropagationResult { f_star, probs, preds, alpha }
}

/// Closed-form propagation: solves `(I - alpha S) F* = Y`.
///
/// The solve is differentiable, so the meta-loss backpropagates through
/// the propagation into the graph and both networks.
pub fn propagate_closed(
    tape: &mut Tape,
    s_norm: Var,
    labels: &LabelMatrix,
    alpha: f64,
) -> Result<PropagationResult> {
    check_alpha("propagate_closed", alpha)?;
    let n = check_node_count("propagate_closed", tape, s_norm, labels)?;
    let y = tape.constant(vec![n, labels.n_classes], labels.y.clone())?;
    let neg = tape.scale(s_norm, -alpha);
    let eye = tape.eye(n);
    let a = tape.add(eye, neg)?;
    let f_star = tape.linsolve(a, y)?;
    Ok(result_from(tape, f_star, alpha, labels.n_classes))
}

/// Literal iteration of `F_{t+1} = alpha S F_t + (1 - alpha) Y` from
/// `F_0 = Y`, returning `F_{t_max}`.
///
/// Converges geometrically to `(1 - alpha)` times the closed-form scores;
/// predictions agree once the iterate is close enough.
pub fn propagate_iterative(
    tape: &mut Tape,
    s_norm: Var,
    labels: &LabelMatrix,
    alpha: f64,
    t_max: usize,
) -> Result<PropagationResult> {
    check_alpha("propagate_iterative", alpha)?;
    if t_max < 1 {
        return Err(Error::InvalidArg {
            op: "propagate_iterative",
            msg: "t_max must be at least 1".to_string(),
        });
    }
    let n = check_node_count("propagate_iterative", tape, s_norm, labels)?;
    let y = tape.constant(vec![n, labels.n_classes], labels.y.clone())?;
    let y_part = tape.scale(y, 1.0 - alpha);
    let mut f = y;
    for _ in 0..t_max {
        let sf = tape.matmul(s_norm, f)?;
        let asf = tape.scale(sf, alpha);
        f = tape.add(asf, y_part)?;
    }
    Ok(result_from(tape, f, alpha, labels.n_classes))
}

/// Cross-entropy of the propagated scores against ground truth over the
/// selected rows. Every in-scope row must have a known label.
pub fn episode_loss(
    tape: &mut Tape,
    result: &PropagationResult,
    labels: &LabelMatrix,
    scope: LossScope,
) -> Result<Var> {
    let mask: Vec<bool> = match scope {
        LossScope::Union => vec![true; labels.n],
        LossScope::QueryOnly => labels.support_mask.iter().map(|&s| !s).collect(),
    };
    let mut flat = vec![0usize; labels.n];
    for i in 0..labels.n {
        if !mask[i] {
            continue;
        }
        flat[i] = labels.true_labels[i].ok_or_else(|| {
            Error::Dataset(format!("row {i} is in the loss scope but has no ground-truth label"))
        })?;
    }
    tape.row_softmax_ce(result.f_star, &flat, &mask)
}

/// Semi-supervised prediction for one query: builds the graph over
/// support ∪ unlabeled ∪ {query}, propagates from the support labels, and
/// returns the query row's argmax.
#[allow(clippy::too_many_arguments)]
pub fn classify_semi(
    model: &ModelParams,
    support_x: &[Vec<f64>],
    support_y: &[usize],
    unlabeled: &[Vec<f64>],
    query: &[f64],
    n_classes: usize,
    k: usize,
    alpha: f64,
) -> Result<usize> {
    if support_x.is_empty() || support_x.len() != support_y.len() {
        return Err(Error::InvalidArg {
            op: "classify_semi",
            msg: format!(
                "support set is empty or inconsistent: {} examples, {} labels",
                support_x.len(),
                support_y.len()
            ),
        });
    }
    let example_shape = model.variant.example_shape();
    let example_len: usize = example_shape.iter().product();
    let n = support_x.len() + unlabeled.len() + 1;
    let mut data = Vec::with_capacity(n * example_len);
    for row in support_x.iter().chain(unlabeled.iter()) {
        if row.len() != example_len {
            return Err(Error::Dataset(format!(
                "example has {} values, embedding expects {example_len}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    if query.len() != example_len {
        return Err(Error::Dataset(format!(
            "query has {} values, embedding expects {example_len}",
            query.len()
        )));
    }
    data.extend_from_slice(query);

    let mut shape = vec![n];
    shape.extend_from_slice(&example_shape);
    let batch = Tensor::new(shape, data)?;

    let mut support_mask = vec![false; n];
    let mut true_labels = vec![None; n];
    for (i, &label) in support_y.iter().enumerate() {
        support_mask[i] = true;
        true_labels[i] = Some(label);
    }
    let lm = LabelMatrix::new(support_mask, true_labels, n_classes)?;

    let mut tape = Tape::new();
    let xv = tape.leaf(&batch);
    let vars = ModelVars::stage(&mut tape, model);
    let g = build_from_model(&mut tape, &vars, xv, k)?;
    let result = propagate_closed(&mut tape, g.s_norm, &lm, alpha)?;
    Ok(result.preds[n - 1])
}
