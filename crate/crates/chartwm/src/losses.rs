//! The five training losses and their weighted total, built as graph
//! compositions so one backward sweep differentiates everything.
//!
//! Latent sequences are passed as per-step slices of shape (K, D) — K
//! parallel segments, D latent dimensions:
//!
//! * `loss_tf` — mean (over steps and segments) ℓ1 distance between
//!   predicted and target latents;
//! * `loss_roll` — the same ℓ1 distance at the terminal step only;
//! * `loss_var` — hinge on per-dimension batch standard deviation, pushing
//!   every dimension's spread up to `gamma`;
//! * `loss_cov` — squared off-diagonal entries of the per-step batch
//!   covariance, decorrelating latent dimensions;
//! * `loss_idm` — squared error of the frozen inverse-dynamics probe
//!   recovering the action from consecutive latents.
//!
//! The variance/covariance/inverse-dynamics terms act on *online-branch*
//! tensors by default (the predicted latents plus the initial online
//! embedding; online latent pairs for the probe). The EMA target branch
//! carries no gradient, so scoring those terms on it would make them
//! constants; a switch (`vicreg_on_target`) restores that literal reading
//! for ablation.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, NodeId};
use crate::params::Bound;
use crate::predictor::idm_forward;
use crate::tensor::Tensor;

/// Weights of the total loss, plus the two scalar constants of the variance
/// hinge. Defaults are the trained configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tf: f64,
    pub roll: f64,
    pub var: f64,
    pub cov: f64,
    pub idm: f64,
    /// Target per-dimension standard deviation of the variance hinge.
    pub gamma: f64,
    /// Stability constant inside the variance square root.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { tf: 1.0, roll: 2.0, var: 2.0, cov: 10.0, idm: 1.0, gamma: 1.0, eps: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.tf, self.roll, self.var, self.cov, self.idm];
        if all.iter().any(|&l| !(l >= 0.0)) {
            return Err(ModelError::InvalidConfig {
                field: "loss weights".into(),
                reason: "every weight must be a finite non-negative number".into(),
            });
        }
        if !(self.gamma > 0.0) || !(self.eps > 0.0) {
            return Err(ModelError::InvalidConfig {
                field: "loss constants".into(),
                reason: "gamma and eps must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Graph nodes of the component losses and the weighted total.
pub struct LossNodes {
    pub tf: NodeId,
    pub roll: NodeId,
    pub var: NodeId,
    pub cov: NodeId,
    pub idm: NodeId,
    pub total: NodeId,
}

/// Scalar values of the component losses and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub tf: f64,
    pub roll: f64,
    pub var: f64,
    pub cov: f64,
    pub idm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, nodes: &LossNodes) -> Self {
        LossBreakdown {
            tf: g.value(nodes.tf).item(),
            roll: g.value(nodes.roll).item(),
            var: g.value(nodes.var).item(),
            cov: g.value(nodes.cov).item(),
            idm: g.value(nodes.idm).item(),
            total: g.value(nodes.total).item(),
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.tf, self.roll, self.var, self.cov, self.idm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {:.6} (tf {:.6} roll {:.6} var {:.6} cov {:.6} idm {:.6})",
            self.total, self.tf, self.roll, self.var, self.cov, self.idm
        )
    }
}

fn check_pairs(g: &Graph, pred: &[NodeId], target: &[NodeId]) -> Result<(usize, usize), ModelError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(ModelError::DimMismatch {
            expected: pred.len(),
            got: target.len(),
            context: "loss needs equally many non-empty prediction and target slices".into(),
        });
    }
    let (k, d) = g.value(pred[0]).dims2();
    for (&p, &t) in pred.iter().zip(target) {
        if g.value(p).dims2() != (k, d) || g.value(t).dims2() != (k, d) {
            return Err(ModelError::DimMismatch {
                expected: k * d,
                got: g.value(t).numel(),
                context: "loss slices must share one (K, D) shape".into(),
            });
        }
    }
    Ok((k, d))
}

/// Mean ℓ1 alignment over all steps: `(1/(H·K)) Σ_t Σ_b ||pred - target||_1`.
pub fn loss_tf(g: &mut Graph, pred: &[NodeId], target: &[NodeId]) -> Result<NodeId, ModelError> {
    let (k, _) = check_pairs(g, pred, target)?;
    let h = pred.len();
    let mut acc: Option<NodeId> = None;
    for (&p, &t) in pred.iter().zip(target) {
        let term = g.sum_abs_diff(p, t);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (h as f64 * k as f64)))
}

/// Terminal-step ℓ1 alignment: `(1/K) Σ_b ||pred_H - target_H||_1`.
pub fn loss_roll(g: &mut Graph, pred: &[NodeId], target: &[NodeId]) -> Result<NodeId, ModelError> {
    let (k, _) = check_pairs(g, pred, target)?;
    let term = g.sum_abs_diff(*pred.last().unwrap(), *target.last().unwrap());
    Ok(g.scale(term, 1.0 / k as f64))
}

fn batch_size(g: &Graph, slices: &[NodeId]) -> Result<(usize, usize), ModelError> {
    if slices.is_empty() {
        return Err(ModelError::DimMismatch {
            expected: 1,
            got: 0,
            context: "variance/covariance losses need at least one latent slice".into(),
        });
    }
    let (k, d) = g.value(slices[0]).dims2();
    if k < 2 {
        return Err(ModelError::BatchTooSmall { got: k });
    }
    Ok((k, d))
}

/// Center each (K, D) slice by its column means. Returns the centered node.
fn center_slice(g: &mut Graph, slice: NodeId, k: usize) -> NodeId {
    let ones = g.constant(Tensor::full(&[1, k], 1.0));
    let colsum = g.matmul(ones, slice);
    let negmean = g.scale(colsum, -1.0 / k as f64);
    g.add_row_vec(slice, negmean)
}

/// Variance hinge: `(1/(H·D)) Σ_t Σ_j max(0, gamma - sqrt(Var_j + eps))`,
/// with the unbiased (K-1) variance over the batch axis.
pub fn loss_var(
    g: &mut Graph,
    slices: &[NodeId],
    gamma: f64,
    eps: f64,
) -> Result<NodeId, ModelError> {
    let (k, d) = batch_size(g, slices)?;
    let h = slices.len();
    let mut acc: Option<NodeId> = None;
    for &slice in slices {
        let centered = center_slice(g, slice, k);
        let sq = g.square(centered);
        let ones = g.constant(Tensor::full(&[1, k], 1.0));
        let sqsum = g.matmul(ones, sq);
        let var = g.scale(sqsum, 1.0 / (k as f64 - 1.0));
        let var_eps = g.add_scalar(var, eps);
        let std = g.sqrt(var_eps);
        let neg = g.scale(std, -1.0);
        let margin = g.add_scalar(neg, gamma);
        let hinge = g.relu(margin);
        let term = g.sum(hinge);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (h as f64 * d as f64)))
}

/// Covariance penalty: per slice, `C = centeredᵀ·centered / (K-1)`;
/// `(1/(H·D)) Σ_t Σ_{i≠j} C_{i,j}²`.
pub fn loss_cov(g: &mut Graph, slices: &[NodeId]) -> Result<NodeId, ModelError> {
    let (k, d) = batch_size(g, slices)?;
    let h = slices.len();
    let mut off_diag = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        off_diag.data_mut()[i * d + i] = 0.0;
    }
    let mask = g.constant(off_diag);
    let mut acc: Option<NodeId> = None;
    for &slice in slices {
        let centered = center_slice(g, slice, k);
        let ct = g.transpose(centered);
        let gram = g.matmul(ct, centered);
        let cov = g.scale(gram, 1.0 / (k as f64 - 1.0));
        let sq = g.square(cov);
        let off = g.mul(sq, mask);
        let term = g.sum(off);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (h as f64 * d as f64)))
}

/// Inverse-dynamics loss: `(1/(H·K)) Σ_t Σ_b ||a_t - probe(z_t, z_{t+1})||²`,
/// actions aligned to the transition's source step.
pub fn loss_idm(
    g: &mut Graph,
    idm_bound: &Bound,
    latents: &[NodeId],
    actions: &[NodeId],
) -> Result<NodeId, ModelError> {
    if latents.len() != actions.len() + 1 || actions.is_empty() {
        return Err(ModelError::DimMismatch {
            expected: actions.len() + 1,
            got: latents.len(),
            context: "inverse dynamics needs H+1 latent slices for H action slices".into(),
        });
    }
    let (k, _) = g.value(latents[0]).dims2();
    let h = actions.len();
    let mut acc: Option<NodeId> = None;
    for t in 0..h {
        let pred_a = idm_forward(g, idm_bound, "idm", latents[t], latents[t + 1]);
        let diff = g.sub(actions[t], pred_a);
        let sq = g.square(diff);
        let term = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (h as f64 * k as f64)))
}

/// All latent slices entering the total loss, each of shape (K, D) except
/// actions (K, 2). Step `t = 0` is the rollout's starting snapshot.
pub struct RolloutNodes {
    /// Predicted latents for steps 1..=H (H slices), from the online branch.
    pub pred: Vec<NodeId>,
    /// EMA-target latents for steps 0..=H (H+1 slices).
    pub target: Vec<NodeId>,
    /// Online-encoder latents for steps 0..=H (H+1 slices).
    pub online: Vec<NodeId>,
    /// Actions for steps 0..H-1 (H slices), aligned to transition sources.
    pub actions: Vec<NodeId>,
}

/// Assemble the weighted total. `vicreg_on_target` switches the variance,
/// covariance, and inverse-dynamics terms onto the gradient-free EMA branch
/// (the literal formulation); the default scores them on the online branch.
pub fn loss_total(
    g: &mut Graph,
    nodes: &RolloutNodes,
    weights: &LossWeights,
    idm_bound: &Bound,
    vicreg_on_target: bool,
) -> Result<LossNodes, ModelError> {
    weights.validate()?;
    let h = nodes.pred.len();
    if nodes.target.len() != h + 1 || nodes.online.len() != h + 1 || nodes.actions.len() != h {
        return Err(ModelError::DimMismatch {
            expected: h + 1,
            got: nodes.target.len().min(nodes.online.len()),
            context: "rollout batch slice counts are inconsistent".into(),
        });
    }

    let tf = loss_tf(g, &nodes.pred, &nodes.target[1..])?;
    let roll = loss_roll(g, &nodes.pred, &nodes.target[1..])?;

    let (var, cov, idm) = if vicreg_on_target {
        let var = loss_var(g, &nodes.target[1..], weights.gamma, weights.eps)?;
        let cov = loss_cov(g, &nodes.target[1..])?;
        let idm = loss_idm(g, idm_bound, &nodes.target, &nodes.actions)?;
        (var, cov, idm)
    } else {
        let mut chain = Vec::with_capacity(h + 1);
        chain.push(nodes.online[0]);
        chain.extend_from_slice(&nodes.pred);
        let var = loss_var(g, &chain, weights.gamma, weights.eps)?;
        let cov = loss_cov(g, &chain)?;
        let idm = loss_idm(g, idm_bound, &nodes.online, &nodes.actions)?;
        (var, cov, idm)
    };

    let wtf = g.scale(tf, weights.tf);
    let wroll = g.scale(roll, weights.roll);
    let wvar = g.scale(var, weights.var);
    let wcov = g.scale(cov, weights.cov);
    let widm = g.scale(idm, weights.idm);
    let s1 = g.add(wtf, wroll);
    let s2 = g.add(s1, wvar);
    let s3 = g.add(s2, wcov);
    let total = g.add(s3, widm);

    Ok(LossNodes { tf, roll, var, cov, idm, total })
}
