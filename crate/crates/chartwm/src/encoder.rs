//! Convolutional latent encoder for delay-domain channel snapshots.
//!
//! The encoder maps a two-plane (magnitude-like, phase-like) image of shape
//! `(2, rows, taps)` to a `D`-dimensional latent. It is a small residual
//! network: a sequence of stages, each opening with a stride-2 block that
//! halves both spatial axes, followed by global average pooling, a linear
//! head, and an output normalization that keeps latent scale pinned —
//! either per-sample standardization with a learned per-dimension affine
//! (the default), or projection onto the unit sphere.
//!
//! Two forward modes share one set of parameters: training mode normalizes
//! with batch statistics (and reports every batch-norm site so the trainer
//! can fold fresh statistics into the running buffers), evaluation mode
//! normalizes with the stored running statistics and is therefore strictly
//! per-sample: each row of the output depends only on its own input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, NodeId};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// How the final latent is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputNorm {
    /// Per-sample standardization (mean 0, variance 1 across dimensions)
    /// followed by a learned per-dimension affine. Keeps all `D` degrees of
    /// freedom available to the variance/covariance regularizers.
    Standardize,
    /// Projection to the unit sphere. Removes the radial degree of freedom;
    /// kept as an option for experiments that prefer bounded latents.
    Sphere,
}

/// Architecture of the latent encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Residual blocks per stage; the first block of every stage is stride 2.
    pub depths: Vec<usize>,
    /// Output channels per stage; must be the same length as `depths`.
    pub channels: Vec<usize>,
    /// Latent dimensionality `D`.
    pub latent_dim: usize,
    /// Output normalization mode.
    pub output_norm: OutputNorm,
    /// Epsilon inside batch-norm denominators.
    pub bn_eps: f64,
    /// Running-statistics update rate: `r = (1 - m) * r + m * batch_stat`.
    pub bn_momentum: f64,
    /// Epsilon inside the output-normalization denominator.
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depths: vec![1, 1, 1, 1],
            channels: vec![16, 32, 32, 32],
            latent_dim: 16,
            output_norm: OutputNorm::Standardize,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depths.is_empty() || self.depths.len() != self.channels.len() {
            return Err(ModelError::InvalidConfig {
                field: "encoder stages".into(),
                reason: format!(
                    "depths has {} entries, channels has {}",
                    self.depths.len(),
                    self.channels.len()
                ),
            });
        }
        if self.depths.iter().any(|&d| d == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(ModelError::InvalidConfig {
                field: "encoder stages".into(),
                reason: "stage depths and channel counts must be positive".into(),
            });
        }
        if self.latent_dim < 2 {
            return Err(ModelError::InvalidConfig {
                field: "latent_dim".into(),
                reason: format!("got {}, need at least 2", self.latent_dim),
            });
        }
        if !(self.bn_eps > 0.0) || !(self.norm_eps > 0.0) {
            return Err(ModelError::InvalidConfig {
                field: "encoder epsilons".into(),
                reason: "bn_eps and norm_eps must be positive".into(),
            });
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(ModelError::InvalidConfig {
                field: "bn_momentum".into(),
                reason: format!("got {}, need (0, 1]", self.bn_momentum),
            });
        }
        Ok(())
    }
}

fn fill_he_normal(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    t.fill_normal(rng, std);
}

fn insert_bn(store: &mut ParamStore, name: &str, ch: usize) {
    store.insert(&format!("{name}.gamma"), Tensor::full(&[ch], 1.0), ParamKind::Gain);
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[ch]), ParamKind::Gain);
    store.insert(&format!("{name}.running_mean"), Tensor::zeros(&[ch]), ParamKind::Buffer);
    store.insert(&format!("{name}.running_var"), Tensor::full(&[ch], 1.0), ParamKind::Buffer);
}

/// Create all encoder parameters under `prefix` (e.g. `"enc"`). Convolution
/// kernels get He-normal initialization, the linear head LeCun-normal
/// (standardization right after it makes the head's scale immaterial), batch
/// norms start as identity with zero-mean/unit-variance running buffers.
pub fn init_encoder_params(
    cfg: &EncoderConfig,
    in_channels: usize,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let mut cin = in_channels;
    for (si, (&depth, &cout)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
        for bi in 0..depth {
            let base = format!("{prefix}.s{si}.b{bi}");
            let stride = if bi == 0 { 2 } else { 1 };
            let bin = if bi == 0 { cin } else { cout };

            let mut w1 = Tensor::zeros(&[cout, bin, 3, 3]);
            fill_he_normal(&mut w1, bin * 9, rng);
            store.insert(&format!("{base}.conv1.w"), w1, ParamKind::Weight);
            insert_bn(store, &format!("{base}.bn1"), cout);

            let mut w2 = Tensor::zeros(&[cout, cout, 3, 3]);
            fill_he_normal(&mut w2, cout * 9, rng);
            store.insert(&format!("{base}.conv2.w"), w2, ParamKind::Weight);
            insert_bn(store, &format!("{base}.bn2"), cout);

            if stride != 1 || bin != cout {
                let mut wd = Tensor::zeros(&[cout, bin, 1, 1]);
                fill_he_normal(&mut wd, bin, rng);
                store.insert(&format!("{base}.down.w"), wd, ParamKind::Weight);
                insert_bn(store, &format!("{base}.down_bn"), cout);
            }
        }
        cin = cout;
    }
    let d = cfg.latent_dim;
    let mut wh = Tensor::zeros(&[cin, d]);
    let std = (1.0 / cin as f64).sqrt();
    wh.fill_normal(rng, std);
    store.insert(&format!("{prefix}.head.w"), wh, ParamKind::Weight);
    store.insert(&format!("{prefix}.head.b"), Tensor::zeros(&[d]), ParamKind::Gain);
    if cfg.output_norm == OutputNorm::Standardize {
        store.insert(&format!("{prefix}.out.gamma"), Tensor::full(&[d], 1.0), ParamKind::Gain);
        store.insert(&format!("{prefix}.out.beta"), Tensor::zeros(&[d]), ParamKind::Gain);
    }
}

/// One training-mode batch-norm node, reported so the trainer can update the
/// running buffers named `{name}.running_mean` / `{name}.running_var` from
/// the node's saved batch statistics.
pub struct BnSite {
    /// Parameter-name prefix of the site, e.g. `"enc.s0.b0.bn1"`.
    pub name: String,
    /// The batch-norm graph node; `graph.saved(node)` is `[mean, biased_var]`.
    pub node: NodeId,
    /// Number of elements each channel statistic was computed over (N*H*W),
    /// needed for the unbiased-variance correction.
    pub count: usize,
}

pub struct EncoderOutput {
    /// Final latent, shape (N, D).
    pub latent: NodeId,
    /// Latent before the learned output affine (equal to `latent` in sphere
    /// mode, which has no affine).
    pub normalized: NodeId,
    /// All batch-norm sites, in forward order; empty in evaluation mode.
    pub bn_sites: Vec<BnSite>,
}

/// Build one encoder forward pass on `x` (shape (N, in_channels, H, W)).
/// `train` selects batch-statistics normalization; otherwise the running
/// buffers in `store` are used and `bn_sites` comes back empty.
pub fn encoder_forward(
    g: &mut Graph,
    cfg: &EncoderConfig,
    store: &ParamStore,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    train: bool,
) -> EncoderOutput {
    let (n, c0, mut h, mut w) = g.value(x).dims4();
    let mut sites: Vec<BnSite> = Vec::new();

    let bn = |g: &mut Graph, sites: &mut Vec<BnSite>, x: NodeId, name: String, count: usize| {
        let gamma = bound.id(&format!("{name}.gamma"));
        let beta = bound.id(&format!("{name}.beta"));
        if train {
            let node = g.batch_norm(x, gamma, beta, cfg.bn_eps);
            sites.push(BnSite { name, node, count });
            node
        } else {
            let mean = store.get(&format!("{name}.running_mean")).clone();
            let var = store.get(&format!("{name}.running_var")).clone();
            g.batch_norm_fixed(x, gamma, beta, mean, var, cfg.bn_eps)
        }
    };

    let mut cur = x;
    let mut cin = c0;
    for (si, (&depth, &cout)) in cfg.depths.iter().zip(&cfg.channels).enumerate() {
        for bi in 0..depth {
            let base = format!("{prefix}.s{si}.b{bi}");
            let stride = if bi == 0 { 2 } else { 1 };
            if stride == 2 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            let count = n * h * w;

            let w1 = bound.id(&format!("{base}.conv1.w"));
            let mut y = g.conv2d(cur, w1, stride, 1);
            y = bn(g, &mut sites, y, format!("{base}.bn1"), count);
            y = g.gelu(y);
            let w2 = bound.id(&format!("{base}.conv2.w"));
            y = g.conv2d(y, w2, 1, 1);
            y = bn(g, &mut sites, y, format!("{base}.bn2"), count);

            let skip = if stride != 1 || cin != cout {
                let wd = bound.id(&format!("{base}.down.w"));
                let s = g.conv2d(cur, wd, stride, 0);
                bn(g, &mut sites, s, format!("{base}.down_bn"), count)
            } else {
                cur
            };
            let sum = g.add(y, skip);
            cur = g.gelu(sum);
            cin = cout;
        }
    }

    let pooled = g.global_avg_pool(cur);
    let wh = bound.id(&format!("{prefix}.head.w"));
    let bh = bound.id(&format!("{prefix}.head.b"));
    let head = g.matmul(pooled, wh);
    let head = g.add_row_vec(head, bh);

    match cfg.output_norm {
        OutputNorm::Standardize => {
            let normalized = g.sample_standardize(head, cfg.norm_eps);
            let gamma = bound.id(&format!("{prefix}.out.gamma"));
            let beta = bound.id(&format!("{prefix}.out.beta"));
            let latent = g.dim_affine(normalized, gamma, beta);
            EncoderOutput { latent, normalized, bn_sites: sites }
        }
        OutputNorm::Sphere => {
            let normalized = g.row_l2_normalize(head, cfg.norm_eps);
            EncoderOutput { latent: normalized, normalized, bn_sites: sites }
        }
    }
}
