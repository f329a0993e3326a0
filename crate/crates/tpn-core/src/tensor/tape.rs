//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] is an arena of nodes. Each operation validates shapes eagerly,
//! computes its value immediately, and records the operand indices plus
//! whatever saved state its backward pass needs (LU factors, pooling argmax,
//! batch statistics, pruning masks). [`Tape::backward`] walks the arena in
//! reverse, accumulating gradients into per-node buffers; it runs at most
//! once per tape and requires a scalar loss.
//!
//! Gradients only flow into nodes whose `needs_grad` flag is set. Leaves
//! inherit the flag from their tensor's `requires_grad`, interior nodes set
//! it when any operand has it, so subgraphs that cannot reach a parameter
//! are skipped entirely.

use crate::error::{Error, Result};
use crate::tensor::linalg::LuFactors;
use crate::tensor::Tensor;

/// Variance stabilizer inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Row degrees below this are clamped before symmetric normalization.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Relu(usize),
    Softplus(usize),
    Sum(usize),
    Reshape(usize),
    Matmul(usize, usize),
    AddBias { x: usize, bias: usize },
    Conv2d { x: usize, w: usize, bias: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    RowScaleInv { x: usize, scale: usize },
    PairwiseSqDist(usize),
    ZeroDiag(usize),
    RowTopK { x: usize, mask: Vec<bool> },
    SymMax(usize),
    SymNormalize { w: usize, degree: Vec<f64>, floored: Vec<bool> },
    LinSolve { a: usize, b: usize, lu: LuFactors },
    RowSoftmaxCe { f: usize, probs: Vec<f64>, labels: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Arena recording a forward computation for a single backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node. Values stay readable after backward.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    /// The accumulated gradient of a node, available once `backward` has
    /// run. `None` for nodes off the loss path or with `needs_grad` unset.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, needs_grad });
        Var { id: self.nodes.len() - 1 }
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Stages a tensor onto the tape. Gradient flows back to the handle
    /// only when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Stages raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArg {
                op: "constant",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Identity matrix constant.
    pub fn eye(&mut self, n: usize) -> Var {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        self.push(Op::Leaf, vec![n, n], data, false)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_elementwise(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::DimMismatch {
                op,
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let ng = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Op::Add(a.id, b.id), shape, value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let ng = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Op::Sub(a.id, b.id), shape, value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let ng = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Op::Mul(a.id, b.id), shape, value, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.id].shape.clone();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::Scale(x.id, c), shape, value, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.id].shape.clone();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::AddScalar(x.id), shape, value, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::Exp(x.id), shape, value, ng)
    }

    /// Rectifier with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.nodes[x.id].value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.id].shape.clone();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::Relu(x.id), shape, value, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value: Vec<f64> =
            self.nodes[x.id].value.iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p()).collect();
        let shape = self.nodes[x.id].shape.clone();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::Softplus(x.id), shape, value, ng)
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.id].value.iter().sum();
        let ng = self.nodes[x.id].needs_grad;
        self.push(Op::Sum(x.id), Vec::new(), vec![total], ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.id].value.len() {
            return Err(Error::DimMismatch {
                op: "reshape",
                lhs: self.nodes[x.id].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[x.id].value.clone();
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::Reshape(x.id), shape, value, ng))
    }

    // ── dense layers ────────────────────────────────────────────────────

    /// Matrix product of rank-2 operands: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::DimMismatch { op: "matmul", lhs: ash.clone(), rhs: bsh.clone() });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let value =
            super::linalg::matmul(&self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n);
        let ng = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Op::Matmul(a.id, b.id), vec![m, n], value, ng))
    }

    /// Adds a length-`n` bias row-wise to an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xsh, bsh) = (&self.nodes[x.id].shape, &self.nodes[bias.id].shape);
        if xsh.len() != 2 || bsh.len() != 1 || bsh[0] != xsh[1] {
            return Err(Error::DimMismatch { op: "add_bias", lhs: xsh.clone(), rhs: bsh.clone() });
        }
        let (m, n) = (xsh[0], xsh[1]);
        let bval = &self.nodes[bias.id].value;
        let mut value = self.nodes[x.id].value.clone();
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += bval[j];
            }
        }
        let ng = self.nodes[x.id].needs_grad || self.nodes[bias.id].needs_grad;
        Ok(self.push(Op::AddBias { x: x.id, bias: bias.id }, vec![m, n], value, ng))
    }

    /// 3x3 convolution, stride 1, zero padding 1: `[B, C, H, W]` with
    /// weights `[F, C, 3, 3]` and bias `[F]` gives `[B, F, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xsh = self.nodes[x.id].shape.clone();
        let wsh = self.nodes[w.id].shape.clone();
        let bsh = &self.nodes[bias.id].shape;
        if xsh.len() != 4 || wsh.len() != 4 {
            return Err(Error::DimMismatch { op: "conv2d", lhs: xsh, rhs: wsh });
        }
        if wsh[2] != 3 || wsh[3] != 3 {
            return Err(Error::InvalidArg {
                op: "conv2d",
                msg: format!("only 3x3 kernels are supported, got {}x{}", wsh[2], wsh[3]),
            });
        }
        if wsh[1] != xsh[1] {
            return Err(Error::DimMismatch { op: "conv2d", lhs: xsh, rhs: wsh });
        }
        if bsh.len() != 1 || bsh[0] != wsh[0] {
            return Err(Error::DimMismatch { op: "conv2d", lhs: wsh, rhs: bsh.clone() });
        }
        let (bsz, cin, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let f_out = wsh[0];
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let bv = &self.nodes[bias.id].value;
        let mut out = vec![0.0; bsz * f_out * h * wd];
        for b in 0..bsz {
            for f in 0..f_out {
                let obase = (b * f_out + f) * h * wd;
                out[obase..obase + h * wd].fill(bv[f]);
                for c in 0..cin {
                    let xbase = (b * cin + c) * h * wd;
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let wval = wv[((f * cin + c) * 3 + di) * 3 + dj];
                            if wval == 0.0 {
                                continue;
                            }
                            for i in 0..h {
                                let xi = i + di;
                                if xi < 1 || xi > h {
                                    continue;
                                }
                                let xi = xi - 1;
                                let orow = obase + i * wd;
                                let xrow = xbase + xi * wd;
                                let j_lo = if dj == 0 { 1 } else { 0 };
                                let j_hi = if dj == 2 { wd - 1 } else { wd };
                                for j in j_lo..j_hi {
                                    out[orow + j] += wval * xv[xrow + j + dj - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.nodes[x.id].needs_grad
            || self.nodes[w.id].needs_grad
            || self.nodes[bias.id].needs_grad;
        Ok(self.push(
            Op::Conv2d { x: x.id, w: w.id, bias: bias.id },
            vec![bsz, f_out, h, wd],
            out,
            ng,
        ))
    }

    /// Batch normalization over dimension 1, statistics taken across all
    /// other dimensions of the current batch (no running averages). The
    /// leading dimension must be at least 2.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xsh = self.nodes[x.id].shape.clone();
        if xsh.len() < 2 {
            return Err(Error::InvalidArg {
                op: "batchnorm",
                msg: format!("input must have rank >= 2, got shape {xsh:?}"),
            });
        }
        if xsh[0] < 2 {
            return Err(Error::InvalidArg {
                op: "batchnorm",
                msg: format!("batch statistics need at least 2 rows, got shape {xsh:?}"),
            });
        }
        let c = xsh[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[v.id].shape;
            if s.len() != 1 || s[0] != c {
                return Err(Error::InvalidArg {
                    op: "batchnorm",
                    msg: format!("{name} must have shape [{c}], got {s:?}"),
                });
            }
        }
        let spatial: usize = xsh[2..].iter().product();
        let bsz = xsh[0];
        let m = (bsz * spatial) as f64;
        let xv = &self.nodes[x.id].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..bsz {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    *m += xv[base + s];
                }
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let d = xv[base + s] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v / m + BN_EPS).sqrt()).collect();
        let gv = &self.nodes[gamma.id].value;
        let bv = &self.nodes[beta.id].value;
        let mut out = vec![0.0; xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    out[base + s] = gv[ch] * (xv[base + s] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let ng = self.nodes[x.id].needs_grad
            || self.nodes[gamma.id].needs_grad
            || self.nodes[beta.id].needs_grad;
        Ok(self.push(
            Op::BatchNorm { x: x.id, gamma: gamma.id, beta: beta.id, mean, inv_std },
            xsh,
            out,
            ng,
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties within a window resolve to the first element in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xsh = self.nodes[x.id].shape.clone();
        if xsh.len() != 4 {
            return Err(Error::InvalidArg {
                op: "maxpool2d",
                msg: format!("input must have rank 4, got shape {xsh:?}"),
            });
        }
        let (bsz, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        if h < 2 || w < 2 {
            return Err(Error::InvalidArg {
                op: "maxpool2d",
                msg: format!("spatial dims must be at least 2x2, got {h}x{w}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.nodes[x.id].value;
        let mut out = vec![0.0; bsz * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let xbase = (b * c + ch) * h * w;
                let obase = (b * c + ch) * ho * wo;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best_idx = xbase + (2 * i) * w + 2 * j;
                        let mut best = xv[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = xbase + (2 * i + di) * w + 2 * j + dj;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                        out[obase + i * wo + j] = best;
                        argmax[obase + i * wo + j] = best_idx;
                    }
                }
            }
        }
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::MaxPool2d { x: x.id, argmax }, vec![bsz, c, ho, wo], out, ng))
    }

    // ── graph construction primitives ───────────────────────────────────

    /// Divides row `i` of `[n, d]` by `scale[i]`; differentiable in both
    /// operands.
    pub fn rowscale_inv(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xsh = self.nodes[x.id].shape.clone();
        let ssh = &self.nodes[scale.id].shape;
        if xsh.len() != 2 || ssh.len() != 1 || ssh[0] != xsh[0] {
            return Err(Error::DimMismatch { op: "rowscale_inv", lhs: xsh, rhs: ssh.clone() });
        }
        let (n, d) = (xsh[0], xsh[1]);
        let sv = &self.nodes[scale.id].value;
        let xv = &self.nodes[x.id].value;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let inv = 1.0 / sv[i];
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] * inv;
            }
        }
        let ng = self.nodes[x.id].needs_grad || self.nodes[scale.id].needs_grad;
        Ok(self.push(Op::RowScaleInv { x: x.id, scale: scale.id }, vec![n, d], out, ng))
    }

    /// All-pairs squared Euclidean distances of the rows of `[n, d]`,
    /// producing `[n, n]`.
    pub fn pairwise_sqdist(&mut self, x: Var) -> Result<Var> {
        let xsh = self.nodes[x.id].shape.clone();
        if xsh.len() != 2 {
            return Err(Error::InvalidArg {
                op: "pairwise_sqdist",
                msg: format!("input must have rank 2, got shape {xsh:?}"),
            });
        }
        let (n, d) = (xsh[0], xsh[1]);
        let xv = &self.nodes[x.id].value;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut acc = 0.0;
                for t in 0..d {
                    let diff = xv[i * d + t] - xv[j * d + t];
                    acc += diff * diff;
                }
                out[i * n + j] = acc;
                out[j * n + i] = acc;
            }
        }
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::PairwiseSqDist(x.id), vec![n, n], out, ng))
    }

    /// Zeroes the diagonal of a square matrix.
    pub fn zero_diag(&mut self, x: Var) -> Result<Var> {
        let n = self.square_dim("zero_diag", x)?;
        let mut out = self.nodes[x.id].value.clone();
        for i in 0..n {
            out[i * n + i] = 0.0;
        }
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::ZeroDiag(x.id), vec![n, n], out, ng))
    }

    /// Keeps the `k` largest entries of each row of a square matrix and
    /// zeroes the rest. Ties at the cutoff resolve to the lower column
    /// index. The mask is constant in the backward pass.
    pub fn row_topk(&mut self, x: Var, k: usize) -> Result<Var> {
        let n = self.square_dim("row_topk", x)?;
        if k < 1 || k > n - 1 {
            return Err(Error::InvalidArg {
                op: "row_topk",
                msg: format!("k must satisfy 1 <= k <= n-1, got k={k} for n={n}"),
            });
        }
        let xv = &self.nodes[x.id].value;
        let mut mask = vec![false; n * n];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * n..(i + 1) * n];
            order.clear();
            order.extend(0..n);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &col in order.iter().take(k) {
                mask[i * n + col] = true;
            }
        }
        let out: Vec<f64> = xv.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::RowTopK { x: x.id, mask }, vec![n, n], out, ng))
    }

    /// Elementwise symmetrization `out[i][j] = max(x[i][j], x[j][i])`.
    /// On exact ties the gradient routes to the `(i, j)` entry.
    pub fn sym_max(&mut self, x: Var) -> Result<Var> {
        let n = self.square_dim("sym_max", x)?;
        let xv = &self.nodes[x.id].value;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j].max(xv[j * n + i]);
            }
        }
        let ng = self.nodes[x.id].needs_grad;
        Ok(self.push(Op::SymMax(x.id), vec![n, n], out, ng))
    }

    /// Symmetric normalization `S = D^{-1/2} W D^{-1/2}` with row degrees
    /// `d_i = sum_j w_ij` clamped below by [`DEGREE_FLOOR`]. Clamped degrees
    /// are constants in the backward pass.
    pub fn sym_normalize(&mut self, w: Var) -> Result<Var> {
        let n = self.square_dim("sym_normalize", w)?;
        let wv = &self.nodes[w.id].value;
        let mut degree = vec![0.0; n];
        let mut floored = vec![false; n];
        for i in 0..n {
            let d: f64 = wv[i * n..(i + 1) * n].iter().sum();
            if d < DEGREE_FLOOR {
                degree[i] = DEGREE_FLOOR;
                floored[i] = true;
            } else {
                degree[i] = d;
            }
        }
        let p: Vec<f64> = degree.iter().map(|&d| 1.0 / d.sqrt()).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = wv[i * n + j] * p[i] * p[j];
            }
        }
        let ng = self.nodes[w.id].needs_grad;
        Ok(self.push(Op::SymNormalize { w: w.id, degree, floored }, vec![n, n], out, ng))
    }

    // ── solves and losses ───────────────────────────────────────────────

    /// Solves `A X = B` by LU with partial pivoting. The factorization is
    /// cached for the backward pass: with upstream gradient `G`,
    /// `dB = A^{-T} G` and `dA = -(A^{-T} G) X^T`.
    pub fn linsolve(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.nodes[a.id].shape.clone();
        let bsh = self.nodes[b.id].shape.clone();
        if ash.len() != 2 || ash[0] != ash[1] || bsh.len() != 2 || bsh[0] != ash[0] {
            return Err(Error::DimMismatch { op: "linsolve", lhs: ash, rhs: bsh });
        }
        let (n, m) = (ash[0], bsh[1]);
        let lu = LuFactors::factor(&self.nodes[a.id].value, n)?;
        let x = lu.solve(&self.nodes[b.id].value, m);
        let ng = self.nodes[a.id].needs_grad || self.nodes[b.id].needs_grad;
        Ok(self.push(Op::LinSolve { a: a.id, b: b.id, lu }, vec![n, m], x, ng))
    }

    /// Row-wise softmax cross-entropy summed over the rows selected by
    /// `mask`: `loss = sum_i mask[i] * (-log softmax(f[i])[labels[i]])`.
    /// Rows are stabilized by max subtraction.
    pub fn row_softmax_ce(&mut self, f: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let fsh = self.nodes[f.id].shape.clone();
        if fsh.len() != 2 {
            return Err(Error::InvalidArg {
                op: "row_softmax_ce",
                msg: format!("scores must have rank 2, got shape {fsh:?}"),
            });
        }
        let (n, classes) = (fsh[0], fsh[1]);
        if labels.len() != n || mask.len() != n {
            return Err(Error::InvalidArg {
                op: "row_softmax_ce",
                msg: format!(
                    "labels ({}) and mask ({}) must both have length {n}",
                    labels.len(),
                    mask.len()
                ),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArg {
                op: "row_softmax_ce",
                msg: "mask selects no rows".to_string(),
            });
        }
        let fv = &self.nodes[f.id].value;
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if labels[i] >= classes {
                return Err(Error::InvalidArg {
                    op: "row_softmax_ce",
                    msg: format!(
                        "label {} out of range for {classes} classes at row {i}",
                        labels[i]
                    ),
                });
            }
            let row = &fv[i * classes..(i + 1) * classes];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for j in 0..classes {
                let e = (row[j] - mx).exp();
                probs[i * classes + j] = e;
                denom += e;
            }
            for j in 0..classes {
                probs[i * classes + j] /= denom;
            }
            loss += denom.ln() + mx - row[labels[i]];
        }
        let ng = self.nodes[f.id].needs_grad;
        Ok(self.push(
            Op::RowSoftmaxCe { f: f.id, probs, labels: labels.to_vec(), mask: mask.to_vec() },
            Vec::new(),
            vec![loss],
            ng,
        ))
    }

    fn square_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        let sh = &self.nodes[x.id].shape;
        if sh.len() != 2 || sh[0] != sh[1] {
            return Err(Error::InvalidArg {
                op,
                msg: format!("input must be a square matrix, got shape {sh:?}"),
            });
        }
        Ok(sh[0])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `loss` into every reachable node
    /// with `needs_grad`. Consumes the tape: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let lnode = &self.nodes[loss.id];
        if lnode.value.len() != 1 {
            return Err(Error::NonScalarLoss { shape: lnode.shape.clone() });
        }
        self.grads = vec![None; self.nodes.len()];
        if !lnode.needs_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let (nodes_below, nodes_rest) = self.nodes.split_at(id);
            let (grads_below, grads_rest) = self.grads.split_at_mut(id);
            let node = &nodes_rest[0];
            let g = grads_rest[0].as_deref().expect("checked above");
            step_backward(node, g, nodes_below, grads_below);
        }
        Ok(())
    }
}

/// Gradient sink for operand `idx`: `None` when the operand does not need a
/// gradient, otherwise its buffer, allocated on first touch.
fn sink<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    idx: usize,
) -> Option<&'g mut [f64]> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn step_backward(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(da) = sink(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(db) = sink(nodes, grads, *b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = sink(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(db) = sink(nodes, grads, *b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = sink(nodes, grads, *a) {
                for ((d, gi), bv) in da.iter_mut().zip(g).zip(&nodes[*b].value) {
                    *d += gi * bv;
                }
            }
            if let Some(db) = sink(nodes, grads, *b) {
                for ((d, gi), av) in db.iter_mut().zip(g).zip(&nodes[*a].value) {
                    *d += gi * av;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for ((d, gi), out) in dx.iter_mut().zip(g).zip(&node.value) {
                    *d += gi * out;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for ((d, gi), xv) in dx.iter_mut().zip(g).zip(&nodes[*x].value) {
                    if *xv > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Softplus(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for ((d, gi), &xv) in dx.iter_mut().zip(g).zip(&nodes[*x].value) {
                    let sig = if xv >= 0.0 {
                        1.0 / (1.0 + (-xv).exp())
                    } else {
                        let e = xv.exp();
                        e / (1.0 + e)
                    };
                    *d += gi * sig;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = sink(nodes, grads, *a) {
                // dA = G B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if let Some(db) = sink(nodes, grads, *b) {
                // dB = A^T G
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + p] * g[i * n + j];
                        }
                        db[p * n + j] += acc;
                    }
                }
            }
        }
        Op::AddBias { x, bias } => {
            let n = nodes[*bias].value.len();
            let m = nodes[*x].shape[0];
            if let Some(dx) = sink(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(db) = sink(nodes, grads, *bias) {
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
            }
        }
        Op::Conv2d { x, w, bias } => {
            let xsh = &nodes[*x].shape;
            let (bsz, cin, h, wd) = (xsh[0], xsh[1], xsh[2], xsh[3]);
            let f_out = nodes[*w].shape[0];
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            if let Some(db) = sink(nodes, grads, *bias) {
                for b in 0..bsz {
                    for (f, dbf) in db.iter_mut().enumerate() {
                        let obase = (b * f_out + f) * h * wd;
                        *dbf += g[obase..obase + h * wd].iter().sum::<f64>();
                    }
                }
            }
            if let Some(dw) = sink(nodes, grads, *w) {
                for b in 0..bsz {
                    for f in 0..f_out {
                        let obase = (b * f_out + f) * h * wd;
                        for c in 0..cin {
                            let xbase = (b * cin + c) * h * wd;
                            for di in 0..3usize {
                                for dj in 0..3usize {
                                    let mut acc = 0.0;
                                    for i in 0..h {
                                        let xi = i + di;
                                        if xi < 1 || xi > h {
                                            continue;
                                        }
                                        let xi = xi - 1;
                                        let j_lo = if dj == 0 { 1 } else { 0 };
                                        let j_hi = if dj == 2 { wd - 1 } else { wd };
                                        for j in j_lo..j_hi {
                                            acc += g[obase + i * wd + j]
                                                * xv[xbase + xi * wd + j + dj - 1];
                                        }
                                    }
                                    dw[((f * cin + c) * 3 + di) * 3 + dj] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = sink(nodes, grads, *x) {
                for b in 0..bsz {
                    for f in 0..f_out {
                        let obase = (b * f_out + f) * h * wd;
                        for c in 0..cin {
                            let xbase = (b * cin + c) * h * wd;
                            for di in 0..3usize {
                                for dj in 0..3usize {
                                    let wval = wv[((f * cin + c) * 3 + di) * 3 + dj];
                                    if wval == 0.0 {
                                        continue;
                                    }
                                    for i in 0..h {
                                        let xi = i + di;
                                        if xi < 1 || xi > h {
                                            continue;
                                        }
                                        let xi = xi - 1;
                                        let j_lo = if dj == 0 { 1 } else { 0 };
                                        let j_hi = if dj == 2 { wd - 1 } else { wd };
                                        for j in j_lo..j_hi {
                                            dx[xbase + xi * wd + j + dj - 1] +=
                                                wval * g[obase + i * wd + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
            let xsh = &nodes[*x].shape;
            let (bsz, c) = (xsh[0], xsh[1]);
            let spatial: usize = xsh[2..].iter().product();
            let m = (bsz * spatial) as f64;
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            // Per-channel reductions of g and g * xhat.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for s in 0..spatial {
                        let xhat = (xv[base + s] - mean[ch]) * inv_std[ch];
                        sum_g[ch] += g[base + s];
                        sum_gx[ch] += g[base + s] * xhat;
                    }
                }
            }
            if let Some(dbeta) = sink(nodes, grads, *beta) {
                for ch in 0..c {
                    dbeta[ch] += sum_g[ch];
                }
            }
            if let Some(dgamma) = sink(nodes, grads, *gamma) {
                for ch in 0..c {
                    dgamma[ch] += sum_gx[ch];
                }
            }
            if let Some(dx) = sink(nodes, grads, *x) {
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            let xhat = (xv[base + s] - mean[ch]) * inv_std[ch];
                            dx[base + s] += gv[ch]
                                * inv_std[ch]
                                * (g[base + s] - sum_g[ch] / m - xhat * sum_gx[ch] / m);
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }
        }
        Op::RowScaleInv { x, scale } => {
            let (n, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let xv = &nodes[*x].value;
            let sv = &nodes[*scale].value;
            if let Some(dx) = sink(nodes, grads, *x) {
                for i in 0..n {
                    let inv = 1.0 / sv[i];
                    for j in 0..d {
                        dx[i * d + j] += g[i * d + j] * inv;
                    }
                }
            }
            if let Some(ds) = sink(nodes, grads, *scale) {
                for i in 0..n {
                    let inv_sq = 1.0 / (sv[i] * sv[i]);
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += g[i * d + j] * xv[i * d + j];
                    }
                    ds[i] -= acc * inv_sq;
                }
            }
        }
        Op::PairwiseSqDist(x) => {
            let (n, d) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let xv = &nodes[*x].value;
            if let Some(dx) = sink(nodes, grads, *x) {
                for i in 0..n {
                    for j in 0..n {
                        let coeff = g[i * n + j] + g[j * n + i];
                        if coeff == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            dx[i * d + t] += 2.0 * coeff * (xv[i * d + t] - xv[j * d + t]);
                        }
                    }
                }
            }
        }
        Op::ZeroDiag(x) => {
            let n = nodes[*x].shape[0];
            if let Some(dx) = sink(nodes, grads, *x) {
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            dx[i * n + j] += g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::RowTopK { x, mask } => {
            if let Some(dx) = sink(nodes, grads, *x) {
                for ((d, gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                    if m {
                        *d += gi;
                    }
                }
            }
        }
        Op::SymMax(x) => {
            let n = nodes[*x].shape[0];
            let xv = &nodes[*x].value;
            if let Some(dx) = sink(nodes, grads, *x) {
                for i in 0..n {
                    for j in 0..n {
                        if xv[i * n + j] >= xv[j * n + i] {
                            dx[i * n + j] += g[i * n + j];
                        } else {
                            dx[j * n + i] += g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::SymNormalize { w, degree, floored } => {
            let n = nodes[*w].shape[0];
            let sv = &node.value;
            let p: Vec<f64> = degree.iter().map(|&d| 1.0 / d.sqrt()).collect();
            if let Some(dw) = sink(nodes, grads, *w) {
                // Row and column contractions of G with S feed the degree
                // derivative, which touches only the row of the perturbed
                // entry.
                let mut row_gs = vec![0.0; n];
                let mut col_gs = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gs = g[i * n + j] * sv[i * n + j];
                        row_gs[i] += gs;
                        col_gs[j] += gs;
                    }
                }
                for a in 0..n {
                    let correction =
                        if floored[a] { 0.0 } else { (row_gs[a] + col_gs[a]) / (2.0 * degree[a]) };
                    for b in 0..n {
                        dw[a * n + b] += g[a * n + b] * p[a] * p[b] - correction;
                    }
                }
            }
        }
        Op::LinSolve { a, b, lu } => {
            let n = lu.n();
            let m = nodes[*b].shape[1];
            let z = lu.solve_transposed(g, m);
            if let Some(db) = sink(nodes, grads, *b) {
                for (d, zi) in db.iter_mut().zip(&z) {
                    *d += zi;
                }
            }
            if let Some(da) = sink(nodes, grads, *a) {
                let xv = &node.value;
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for t in 0..m {
                            acc += z[i * m + t] * xv[j * m + t];
                        }
                        da[i * n + j] -= acc;
                    }
                }
            }
        }
        Op::RowSoftmaxCe { f, probs, labels, mask } => {
            let classes = nodes[*f].shape[1];
            if let Some(df) = sink(nodes, grads, *f) {
                let g0 = g[0];
                for (i, &keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    for j in 0..classes {
                        let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                        df[i * classes + j] += g0 * (probs[i * classes + j] - indicator);
                    }
                }
            }
        }
    }
}
