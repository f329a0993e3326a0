//! Embedding and length-scale networks.
//!
//! Two embedding variants share one interface: a 4-block convolutional
//! network for image-shaped inputs (each block is a 3x3 convolution with 64
//! filters, batch normalization, ReLU, and 2x2 max pooling, so 84x84 inputs
//! come out as 64x5x5 feature maps), and a 3-layer MLP for flat inputs.
//!
//! The length-scale network `g` produces one positive scale per example from
//! its embedded features: `sigma_i = softplus(raw_i) + SIGMA_FLOOR`. The
//! convolutional variant runs two conv blocks (64 filters, then a single
//! filter) followed by dense layers of 8 and 1 units; the MLP variant uses
//! the two dense layers alone. Its final layer starts at weight zero, bias
//! one, so every example opens with the same scale and the layer still
//! receives gradient through the bias.
//!
//! Parameters are staged onto a tape per episode with [`ModelVars::stage`]
//! and gradients flow back through [`ModelVars::absorb`]; the two walk the
//! parameter tree in the same canonical order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};
use crate::tensor::{Tape, Tensor, Var};

/// Additive floor keeping example scales strictly positive.
pub const SIGMA_FLOOR: f64 = 0.01;

/// Width of the hidden dense layer in the length-scale network.
const SIGMA_HIDDEN: usize = 8;

/// Filter count of the convolutional blocks.
const CONV_FILTERS: usize = 64;

/// Architecture selector for the embedding network. The length-scale
/// network follows the same choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingVariant {
    /// 4 conv blocks for `[B, in_channels, H, W]` inputs.
    Conv4 { in_channels: usize },
    /// 3 dense layers for `[B, input_dim]` inputs.
    Mlp { input_dim: usize, hidden_dim: usize, embed_dim: usize },
}

impl EmbeddingVariant {
    /// Shape of a single example this variant accepts.
    pub fn example_shape(&self) -> Vec<usize> {
        match self {
            EmbeddingVariant::Conv4 { in_channels } => vec![*in_channels, 84, 84],
            EmbeddingVariant::Mlp { input_dim, .. } => vec![*input_dim],
        }
    }
}

/// Convolution block parameters: 3x3 weights, bias, and batch norm affine
/// terms.
#[derive(Debug, Clone)]
pub struct ConvBlockParams {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Dense layer parameters with `w` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub enum EmbeddingParams {
    Conv4 { blocks: Vec<ConvBlockParams> },
    Mlp { layers: Vec<DenseParams> },
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SigmaNetParams {
    Conv { block1: ConvBlockParams, block2: ConvBlockParams, fc1: DenseParams, fc2: DenseParams },
    Mlp { fc1: DenseParams, fc2: DenseParams },
}

/// Full trainable state: embedding plus length-scale network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub variant: EmbeddingVariant,
    pub embedding: EmbeddingParams,
    pub sigma: SigmaNetParams,
}

fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor { shape, data, requires_grad: true, grad: None }
}

fn conv_block(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvBlockParams {
    ConvBlockParams {
        w: he_uniform(vec![cout, cin, 3, 3], cin * 9, rng),
        b: Tensor::zeros(vec![cout]).with_grad(),
        gamma: Tensor::filled(vec![cout], 1.0).with_grad(),
        beta: Tensor::zeros(vec![cout]).with_grad(),
    }
}

fn dense(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseParams {
    DenseParams {
        w: he_uniform(vec![fan_in, fan_out], fan_in, rng),
        b: Tensor::zeros(vec![fan_out]).with_grad(),
    }
}

/// Final length-scale layer: zero weights, unit bias, so sigma starts equal
/// across examples.
fn sigma_head(fan_in: usize) -> DenseParams {
    DenseParams {
        w: Tensor::zeros(vec![fan_in, 1]).with_grad(),
        b: Tensor::filled(vec![1], 1.0).with_grad(),
    }
}

impl ModelParams {
    /// Initializes both networks from the `Init` stream of `seed`:
    /// He-uniform weights, zero biases, unit batch-norm gains.
    pub fn init(variant: EmbeddingVariant, seed: u64) -> Self {
        let rng = &mut stream(seed, StreamKind::Init, 0);
        let (embedding, sigma) = match &variant {
            EmbeddingVariant::Conv4 { in_channels } => {
                let mut blocks = Vec::with_capacity(4);
                let mut cin = *in_channels;
                for _ in 0..4 {
                    blocks.push(conv_block(cin, CONV_FILTERS, rng));
                    cin = CONV_FILTERS;
                }
                let sigma = SigmaNetParams::Conv {
                    block1: conv_block(CONV_FILTERS, CONV_FILTERS, rng),
                    block2: conv_block(CONV_FILTERS, 1, rng),
                    fc1: dense(1, SIGMA_HIDDEN, rng),
                    fc2: sigma_head(SIGMA_HIDDEN),
                };
                (EmbeddingParams::Conv4 { blocks }, sigma)
            }
            EmbeddingVariant::Mlp { input_dim, hidden_dim, embed_dim } => {
                let layers = vec![
                    dense(*input_dim, *hidden_dim, rng),
                    dense(*hidden_dim, *hidden_dim, rng),
                    dense(*hidden_dim, *embed_dim, rng),
                ];
                let sigma = SigmaNetParams::Mlp {
                    fc1: dense(*embed_dim, SIGMA_HIDDEN, rng),
                    fc2: sigma_head(SIGMA_HIDDEN),
                };
                (EmbeddingParams::Mlp { layers }, sigma)
            }
        };
        ModelParams { variant, embedding, sigma }
    }

    /// Parameters with canonical names, in the canonical order shared by
    /// [`ModelVars::stage`] and [`ModelVars::absorb`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.embedding {
            EmbeddingParams::Conv4 { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    push_block_refs(&mut out, &format!("embed.block{i}"), b);
                }
            }
            EmbeddingParams::Mlp { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    push_dense_refs(&mut out, &format!("embed.fc{i}"), l);
                }
            }
        }
        match &self.sigma {
            SigmaNetParams::Conv { block1, block2, fc1, fc2 } => {
                push_block_refs(&mut out, "sigma.block0", block1);
                push_block_refs(&mut out, "sigma.block1", block2);
                push_dense_refs(&mut out, "sigma.fc0", fc1);
                push_dense_refs(&mut out, "sigma.fc1", fc2);
            }
            SigmaNetParams::Mlp { fc1, fc2 } => {
                push_dense_refs(&mut out, "sigma.fc0", fc1);
                push_dense_refs(&mut out, "sigma.fc1", fc2);
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.embedding {
            EmbeddingParams::Conv4 { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.push((format!("embed.block{i}.w"), &mut b.w));
                    out.push((format!("embed.block{i}.b"), &mut b.b));
                    out.push((format!("embed.block{i}.gamma"), &mut b.gamma));
                    out.push((format!("embed.block{i}.beta"), &mut b.beta));
                }
            }
            EmbeddingParams::Mlp { layers } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("embed.fc{i}.w"), &mut l.w));
                    out.push((format!("embed.fc{i}.b"), &mut l.b));
                }
            }
        }
        match &mut self.sigma {
            SigmaNetParams::Conv { block1, block2, fc1, fc2 } => {
                for (name, b) in [("sigma.block0", block1), ("sigma.block1", block2)] {
                    out.push((format!("{name}.w"), &mut b.w));
                    out.push((format!("{name}.b"), &mut b.b));
                    out.push((format!("{name}.gamma"), &mut b.gamma));
                    out.push((format!("{name}.beta"), &mut b.beta));
                }
                for (name, d) in [("sigma.fc0", fc1), ("sigma.fc1", fc2)] {
                    out.push((format!("{name}.w"), &mut d.w));
                    out.push((format!("{name}.b"), &mut d.b));
                }
            }
            SigmaNetParams::Mlp { fc1, fc2 } => {
                for (name, d) in [("sigma.fc0", fc1), ("sigma.fc1", fc2)] {
                    out.push((format!("{name}.w"), &mut d.w));
                    out.push((format!("{name}.b"), &mut d.b));
                }
            }
        }
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Drops all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }
}

fn push_block_refs<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, b: &'a ConvBlockParams) {
    out.push((format!("{name}.w"), &b.w));
    out.push((format!("{name}.b"), &b.b));
    out.push((format!("{name}.gamma"), &b.gamma));
    out.push((format!("{name}.beta"), &b.beta));
}

fn push_dense_refs<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, d: &'a DenseParams) {
    out.push((format!("{name}.w"), &d.w));
    out.push((format!("{name}.b"), &d.b));
}

// ── staging onto a tape ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct ConvBlockVars {
    w: Var,
    b: Var,
    gamma: Var,
    beta: Var,
}

#[derive(Debug, Clone, Copy)]
struct DenseVars {
    w: Var,
    b: Var,
}

#[derive(Debug, Clone)]
enum EmbeddingVars {
    Conv4 { blocks: Vec<ConvBlockVars> },
    Mlp { layers: Vec<DenseVars> },
}

#[derive(Debug, Clone)]
enum SigmaVars {
    Conv { block1: ConvBlockVars, block2: ConvBlockVars, fc1: DenseVars, fc2: DenseVars },
    Mlp { fc1: DenseVars, fc2: DenseVars },
}

/// Tape handles for one episode's staging of the model parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    embedding: EmbeddingVars,
    sigma: SigmaVars,
    ordered: Vec<Var>,
}

fn stage_block(tape: &mut Tape, p: &ConvBlockParams, ordered: &mut Vec<Var>) -> ConvBlockVars {
    let v = ConvBlockVars {
        w: tape.leaf(&p.w),
        b: tape.leaf(&p.b),
        gamma: tape.leaf(&p.gamma),
        beta: tape.leaf(&p.beta),
    };
    ordered.extend([v.w, v.b, v.gamma, v.beta]);
    v
}

fn stage_dense(tape: &mut Tape, p: &DenseParams, ordered: &mut Vec<Var>) -> DenseVars {
    let v = DenseVars { w: tape.leaf(&p.w), b: tape.leaf(&p.b) };
    ordered.extend([v.w, v.b]);
    v
}

impl ModelVars {
    /// Stages every parameter as a tape leaf, in canonical order.
    pub fn stage(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut ordered = Vec::new();
        let embedding = match &params.embedding {
            EmbeddingParams::Conv4 { blocks } => EmbeddingVars::Conv4 {
                blocks: blocks.iter().map(|b| stage_block(tape, b, &mut ordered)).collect(),
            },
            EmbeddingParams::Mlp { layers } => EmbeddingVars::Mlp {
                layers: layers.iter().map(|l| stage_dense(tape, l, &mut ordered)).collect(),
            },
        };
        let sigma = match &params.sigma {
            SigmaNetParams::Conv { block1, block2, fc1, fc2 } => SigmaVars::Conv {
                block1: stage_block(tape, block1, &mut ordered),
                block2: stage_block(tape, block2, &mut ordered),
                fc1: stage_dense(tape, fc1, &mut ordered),
                fc2: stage_dense(tape, fc2, &mut ordered),
            },
            SigmaNetParams::Mlp { fc1, fc2 } => SigmaVars::Mlp {
                fc1: stage_dense(tape, fc1, &mut ordered),
                fc2: stage_dense(tape, fc2, &mut ordered),
            },
        };
        ModelVars { embedding, sigma, ordered }
    }

    /// Accumulates tape gradients back into the parameter tensors after
    /// `backward`. Parameters that received no gradient are left untouched.
    pub fn absorb(&self, tape: &Tape, params: &mut ModelParams) -> Result<()> {
        let named = params.named_mut();
        if named.len() != self.ordered.len() {
            return Err(Error::InvalidArg {
                op: "absorb",
                msg: format!(
                    "staged {} parameters but model has {}",
                    self.ordered.len(),
                    named.len()
                ),
            });
        }
        for ((_, tensor), var) in named.into_iter().zip(&self.ordered) {
            if let Some(g) = tape.grad(*var) {
                tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Embeds a batch: `[B, C, H, W]` through the conv blocks or `[B, D]`
    /// through the dense stack.
    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.embedding {
            EmbeddingVars::Conv4 { blocks } => {
                let mut h = x;
                for blk in blocks {
                    h = forward_block(tape, blk, h)?;
                }
                Ok(h)
            }
            EmbeddingVars::Mlp { layers } => {
                let mut h = x;
                for (i, l) in layers.iter().enumerate() {
                    h = tape.matmul(h, l.w)?;
                    h = tape.add_bias(h, l.b)?;
                    if i + 1 < layers.len() {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Example-wise length scales from embedded features: `[B]`, each at
    /// least [`SIGMA_FLOOR`].
    pub fn sigma(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let batch = tape.shape(features)[0];
        let raw = match &self.sigma {
            SigmaVars::Conv { block1, block2, fc1, fc2 } => {
                let h = forward_block(tape, block1, features)?;
                let h = forward_block(tape, block2, h)?;
                let flat_dim: usize = tape.shape(h)[1..].iter().product();
                let h = tape.reshape(h, vec![batch, flat_dim])?;
                let h = tape.matmul(h, fc1.w)?;
                let h = tape.add_bias(h, fc1.b)?;
                let h = tape.relu(h);
                let h = tape.matmul(h, fc2.w)?;
                tape.add_bias(h, fc2.b)?
            }
            SigmaVars::Mlp { fc1, fc2 } => {
                let h = tape.matmul(features, fc1.w)?;
                let h = tape.add_bias(h, fc1.b)?;
                let h = tape.relu(h);
                let h = tape.matmul(h, fc2.w)?;
                tape.add_bias(h, fc2.b)?
            }
        };
        let raw = tape.reshape(raw, vec![batch])?;
        let sp = tape.softplus(raw);
        Ok(tape.add_scalar(sp, SIGMA_FLOOR))
    }
}

fn forward_block(tape: &mut Tape, blk: &ConvBlockVars, x: Var) -> Result<Var> {
    let h = tape.conv2d(x, blk.w, blk.b)?;
    let h = tape.batchnorm(h, blk.gamma, blk.beta)?;
    let h = tape.relu(h);
    tape.maxpool2d(h)
}

/// Flattens `[B, ...]` features to `[B, prod(...)]` for graph construction.
pub fn flatten(tape: &mut Tape, features: Var) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.is_empty() {
        return Err(Error::InvalidArg {
            op: "flatten",
            msg: "features must have at least one dimension".to_string(),
        });
    }
    let batch = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(features, vec![batch, rest])
}
