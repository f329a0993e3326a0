//! Episodic neighborhood graph, built differentiably on a tape.
//!
//! The pipeline is: scale each example's features by its own length scale,
//! take all-pairs squared Euclidean distances, map through the Gaussian
//! kernel `exp(-D/2)` with the diagonal forced to zero, keep the k largest
//! entries per row, symmetrize by elementwise max, and normalize as
//! `S = D^{-1/2} W_k D^{-1/2}` with a degree floor for isolated nodes.
//!
//! Distances use the ratio `f_i / sigma_i`, so scaling all features and all
//! sigmas by the same constant leaves the graph unchanged. The pruning mask
//! is constant in the backward pass; gradient flows only through surviving
//! entries.

use crate::error::Result;
use crate::networks::{flatten, ModelVars};
use crate::tensor::{Tape, Var};

/// Default neighbor count, clamped to `n - 1` on small episodes.
pub const DEFAULT_K: usize = 20;

/// Handles to every stage of one episode's graph.
#[derive(Debug, Clone)]
pub struct EpisodeGraph {
    /// Node count (supports plus queries, plus any unlabeled pool).
    pub n: usize,
    /// Dense Gaussian similarity with zero diagonal.
    pub w: Var,
    /// Pruned, symmetrized similarity.
    pub w_k: Var,
    /// Symmetrically normalized matrix fed to propagation.
    pub s_norm: Var,
    /// Example-wise length scales used for the distances.
    pub sigmas: Var,
    /// Neighbor count actually used after clamping.
    pub k: usize,
}

/// Squared Euclidean distances of sigma-scaled features:
/// `D_ij = || f_i / sigma_i - f_j / sigma_j ||^2`.
pub fn scaled_distances(tape: &mut Tape, features: Var, sigmas: Var) -> Result<Var> {
    let scaled = tape.rowscale_inv(features, sigmas)?;
    tape.pairwise_sqdist(scaled)
}

/// Gaussian similarity `W = exp(-D/2)` with the diagonal forced to zero,
/// excluding self-similarity before pruning.
pub fn similarity(tape: &mut Tape, distances: Var) -> Result<Var> {
    let scaled = tape.scale(distances, -0.5);
    let w = tape.exp(scaled);
    tape.zero_diag(w)
}

/// Keeps the `k` largest entries of each row, then symmetrizes with
/// elementwise max. Ties at the cutoff break toward the lower column index.
pub fn knn_prune(tape: &mut Tape, w: Var, k: usize) -> Result<Var> {
    let pruned = tape.row_topk(w, k)?;
    tape.sym_max(pruned)
}

/// Symmetric normalization `S = D^{-1/2} W_k D^{-1/2}` with row degrees
/// floored at 1e-12, so isolated nodes yield zero rows instead of NaN.
pub fn normalized_laplacian(tape: &mut Tape, w_k: Var) -> Result<Var> {
    tape.sym_normalize(w_k)
}

/// Runs the full pipeline from flattened features and sigmas. `k` is
/// clamped to `n - 1`.
pub fn build_graph(tape: &mut Tape, features: Var, sigmas: Var, k: usize) -> Result<EpisodeGraph> {
    let n = tape.shape(features)[0];
    let k = k.min(n.saturating_sub(1)).max(1);
    let d = scaled_distances(tape, features, sigmas)?;
    let w = similarity(tape, d)?;
    let w_k = knn_prune(tape, w, k)?;
    let s_norm = normalized_laplacian(tape, w_k)?;
    Ok(EpisodeGraph { n, w, w_k, s_norm, sigmas, k })
}

/// Embeds a staged batch and builds its graph: features through the
/// embedding network, length scales through the sigma network, then
/// [`build_graph`].
pub fn build_from_model(
    tape: &mut Tape,
    vars: &ModelVars,
    x: Var,
    k: usize,
) -> Result<EpisodeGraph> {
    let feats = vars.embed(tape, x)?;
    let sigmas = vars.sigma(tape, feats)?;
    let flat = flatten(tape, feats)?;
    build_graph(tape, flat, sigmas, k)
}
