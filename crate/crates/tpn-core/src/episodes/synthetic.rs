//! Deterministic synthetic datasets.
//!
//! Three families at increasing difficulty for mean-based classifiers:
//! Gaussian blobs (separable clusters), concentric rings (all class means
//! collapse at the origin, so nearest-prototype inference degrades toward
//! chance while propagation along each ring succeeds), and noisy arcs
//! (1-D manifold segments of a shared circle). Rings and arcs live in the
//! first two coordinates; remaining dimensions carry pure noise.
//!
//! Generation draws one random stream per class, so datasets are
//! bit-identical across runs for a fixed `(kind, params, seed)`.

use super::{ClassRecord, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::TAU;

/// Synthetic dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    GaussianBlobs,
    ConcentricRings,
    NoisyArcs,
}

impl SyntheticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SyntheticKind::GaussianBlobs => "gaussian-blobs",
            SyntheticKind::ConcentricRings => "concentric-rings",
            SyntheticKind::NoisyArcs => "noisy-arcs",
        }
    }

    fn class_prefix(&self) -> &'static str {
        match self {
            SyntheticKind::GaussianBlobs => "blob",
            SyntheticKind::ConcentricRings => "ring",
            SyntheticKind::NoisyArcs => "arc",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(SyntheticKind::GaussianBlobs),
            "concentric-rings" => Ok(SyntheticKind::ConcentricRings),
            "noisy-arcs" => Ok(SyntheticKind::NoisyArcs),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?}, expected gaussian-blobs, \
                 concentric-rings or noisy-arcs"
            ))),
        }
    }
}

impl std::fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spread of blob centers relative to the unit noise scale.
const BLOB_CENTER_SCALE: f64 = 3.0;
/// Shared circle radius for the arcs family.
const ARC_RADIUS: f64 = 2.0;
/// Fraction of each class's angular slot that the arc occupies; the rest
/// is a gap separating neighboring classes.
const ARC_FILL: f64 = 0.75;

/// Class index to split tag: a fixed 3/1/1 cycle, so any dataset with at
/// least five classes has material in every split.
fn split_for(class: usize) -> Split {
    match class % 5 {
        0..=2 => Split::Train,
        3 => Split::Val,
        _ => Split::Test,
    }
}

/// Generates a deterministic synthetic dataset.
///
/// Rings get radius `1 + class_index`; arcs tile a shared circle with one
/// angular segment per class. `noise` is the standard deviation added to
/// every coordinate (and filling the padding dimensions).
pub fn gen_synthetic(
    kind: SyntheticKind,
    classes: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            msg: format!("need at least 2 classes, got {classes}"),
        });
    }
    if per_class < 20 {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            msg: format!("need at least 20 examples per class, got {per_class}"),
        });
    }
    let min_dim = match kind {
        SyntheticKind::GaussianBlobs => 1,
        _ => 2,
    };
    if dim < min_dim {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            msg: format!("{kind} needs dim >= {min_dim}, got {dim}"),
        });
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidArg {
            op: "gen_synthetic",
            msg: format!("noise must be a finite non-negative number, got {noise}"),
        });
    }

    let mut records = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut rng = stream(seed, StreamKind::Noise, c as u64);
        let mut examples = Vec::with_capacity(per_class);
        match kind {
            SyntheticKind::GaussianBlobs => {
                let center: Vec<f64> = (0..dim)
                    .map(|_| BLOB_CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for _ in 0..per_class {
                    examples.push(
                        center
                            .iter()
                            .map(|&m| m + noise * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    );
                }
            }
            SyntheticKind::ConcentricRings => {
                let radius = 1.0 + c as f64;
                for _ in 0..per_class {
                    let theta = rng.random_range(0.0..TAU);
                    examples.push(curve_point(radius, theta, dim, noise, &mut rng));
                }
            }
            SyntheticKind::NoisyArcs => {
                let slot = TAU / classes as f64;
                let start = c as f64 * slot;
                for _ in 0..per_class {
                    let theta = start + rng.random_range(0.0..ARC_FILL * slot);
                    examples.push(curve_point(ARC_RADIUS, theta, dim, noise, &mut rng));
                }
            }
        }
        records.push(ClassRecord {
            id: c as u32,
            name: format!("{}-{c:02}", kind.class_prefix()),
            split: split_for(c),
            examples,
        });
    }

    let ds = Dataset { example_shape: vec![dim], classes: records };
    ds.validate()?;
    Ok(ds)
}

/// A point on a circle of the given radius, noised on the two curve
/// coordinates and padded with pure-noise dimensions.
fn curve_point(radius: f64, theta: f64, dim: usize, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(dim);
    x.push(radius * theta.cos() + noise * rng.sample::<f64, _>(StandardNormal));
    x.push(radius * theta.sin() + noise * rng.sample::<f64, _>(StandardNormal));
    for _ in 2..dim {
        x.push(noise * rng.sample::<f64, _>(StandardNormal));
    }
    x
}
