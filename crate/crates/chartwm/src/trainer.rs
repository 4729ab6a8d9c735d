//! The optimization loop: segment sampling, AdamW with decoupled weight
//! decay, warm-up + cosine learning-rate schedule, linear weight-decay ramp,
//! EMA target maintenance, batch-norm running statistics, loss toggles for
//! ablations, and per-step logging.
//!
//! One training step:
//! 1. sample K rollout segments (H+1 snapshots, H actions) uniformly over
//!    all valid (trajectory, start) pairs;
//! 2. preprocess both branches; tube-mask the online branch only — the
//!    target branch sees clean inputs;
//! 3. one graph: online encoder over all (H+1)·K masked snapshots (time-
//!    major rows), EMA target encoder over the clean ones (bound as
//!    constants, so the stop-gradient falls out of the autodiff), rollout
//!    from the step-0 online latent, total loss;
//! 4. backward, global-norm gradient clip, AdamW on the online encoder and
//!    the predictor; the inverse-dynamics probe and the target encoder are
//!    never updated by the optimizer;
//! 5. fold fresh batch statistics into the online running buffers, then pull
//!    the target store toward the online store by the EMA decay.
//!
//! Everything is derived from the run seed through named streams, so a rerun
//! with the same configuration is bit-identical.
//!
//! Epoch boundaries are storage-precision barriers: all mutable training
//! state is rounded through f32 — the precision checkpoints store — before
//! the epoch callback runs. A run resumed from a boundary checkpoint
//! therefore reproduces the uninterrupted run's remaining steps bit for bit.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{atomic_write, Dataset};
use crate::encoder::{encoder_forward, BnSite};
use crate::error::{DataError, ModelError, NumericsError};
use crate::graph::{Graph, NodeId};
use crate::losses::{loss_total, LossBreakdown, LossWeights, RolloutNodes};
use crate::model::WorldModel;
use crate::params::{bind_params, collect_grads, ParamKind, ParamStore};
use crate::predictor::rollout_forward;
use crate::preprocess::{to_model_input, truncate_delay, tube_mask, PreprocConfig};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Per-component loss switches for ablation studies. Disabling a component
/// is exactly equivalent to setting its weight to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub tf: bool,
    pub roll: bool,
    pub var: bool,
    pub cov: bool,
    pub idm: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { tf: true, roll: true, var: true, cov: true, idm: true }
    }
}

impl LossToggles {
    /// Weights with disabled components zeroed.
    pub fn effective(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            tf: if self.tf { w.tf } else { 0.0 },
            roll: if self.roll { w.roll } else { 0.0 },
            var: if self.var { w.var } else { 0.0 },
            cov: if self.cov { w.cov } else { 0.0 },
            idm: if self.idm { w.idm } else { 0.0 },
            gamma: w.gamma,
            eps: w.eps,
        }
    }
}

/// Training hyperparameters. Defaults are the desk-scale configuration
/// (30 epochs, K = 32); the full-scale run uses 100 epochs and K = 128 via
/// configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Parallel rollout segments per step (the batch size K).
    pub batch_k: usize,
    /// Rollout horizon H: each segment has H+1 snapshots and H actions.
    pub horizon: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    /// Fraction of total steps spent in the linear warm-up.
    pub warmup_frac: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    /// EMA decay pulling the target encoder toward the online encoder.
    pub ema_decay: f64,
    /// Global gradient-norm clip; guards the matrix exponential against
    /// overflow in the earliest steps.
    pub clip_norm: f64,
    pub toggles: LossToggles,
    /// Score variance/covariance/inverse-dynamics terms on the gradient-free
    /// EMA branch (the literal formulation) instead of the online branch.
    pub vicreg_on_target: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_k: 32,
            horizon: 6,
            lr_start: 1e-4,
            lr_peak: 3e-4,
            lr_end: 1e-6,
            warmup_frac: 0.05,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_decay: 0.9995,
            clip_norm: 10.0,
            toggles: LossToggles::default(),
            vicreg_on_target: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_k < 2 {
            return Err(ModelError::BatchTooSmall { got: self.batch_k });
        }
        if self.horizon < 1 {
            return Err(ModelError::InvalidConfig {
                field: "horizon".into(),
                reason: "need at least one rollout step".into(),
            });
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(ModelError::InvalidConfig {
                field: "warmup_frac".into(),
                reason: format!("need 0 < f < 1, got {}", self.warmup_frac),
            });
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_end", self.lr_end),
            ("wd_start", self.wd_start),
            ("wd_end", self.wd_end),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidConfig {
                    field: name.into(),
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return Err(ModelError::InvalidConfig {
                field: "ema_decay".into(),
                reason: format!("need 0 <= d <= 1, got {}", self.ema_decay),
            });
        }
        if !(self.clip_norm > 0.0) {
            return Err(ModelError::InvalidConfig {
                field: "clip_norm".into(),
                reason: format!("must be positive, got {}", self.clip_norm),
            });
        }
        Ok(())
    }
}

/// Draw `k` rollout segments as (trajectory index, start offset) pairs,
/// uniform over every valid pair across the dataset. A trajectory with `L`
/// snapshots contributes `L - horizon` valid starts (none if `L < horizon+1`);
/// segments never straddle trajectory boundaries.
pub fn sample_rollout_segments(
    dataset: &Dataset,
    horizon: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>, ModelError> {
    let mut spans: Vec<(usize, usize, usize)> = Vec::new(); // (traj, cum_start, count)
    let mut total = 0usize;
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        let len = tr.snapshots.len();
        if len >= horizon + 1 {
            let count = len - horizon;
            spans.push((i, total, count));
            total += count;
        }
    }
    if total == 0 {
        return Err(ModelError::NoValidSegment { horizon, need: horizon + 1 });
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let u = rng.gen_range(0..total);
        // spans is sorted by cum_start; find the span containing u.
        let idx = spans.partition_point(|&(_, cum, _)| cum <= u) - 1;
        let (traj, cum, _) = spans[idx];
        out.push((traj, u - cum));
    }
    Ok(out)
}

fn check_step_range(step: usize, total_steps: usize) -> Result<(), ModelError> {
    if step > total_steps {
        return Err(ModelError::InvalidConfig {
            field: "schedule step".into(),
            reason: format!("step {step} out of range 0..={total_steps}"),
        });
    }
    Ok(())
}

/// Learning rate at `step` of `total_steps`: linear from `lr_start` to
/// `lr_peak` over the first `ceil(warmup_frac * total)` steps, then cosine
/// from `lr_peak` down to `lr_end`. Continuous at the junction.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, ModelError> {
    check_step_range(step, total_steps)?;
    if total_steps == 0 {
        return Ok(cfg.lr_start);
    }
    let warmup = ((cfg.warmup_frac * total_steps as f64).ceil() as usize).max(1);
    if step <= warmup {
        // Convex combination rather than start + span*t: exact at both ends.
        let t = step as f64 / warmup as f64;
        Ok(cfg.lr_start * (1.0 - t) + cfg.lr_peak * t)
    } else {
        let p = (step - warmup) as f64 / (total_steps - warmup) as f64;
        Ok(cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

/// Weight decay at `step`: linear ramp from `wd_start` to `wd_end`.
pub fn wd_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64, ModelError> {
    check_step_range(step, total_steps)?;
    if total_steps == 0 {
        return Ok(cfg.wd_start);
    }
    let t = step as f64 / total_steps as f64;
    Ok(cfg.wd_start * (1.0 - t) + cfg.wd_end * t)
}

/// AdamW constants beyond the scheduled learning rate and weight decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment state for one parameter store, aligned with the
/// store's non-buffer entries in order.
#[derive(Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, tensor, kind) in store.iter() {
            if kind == ParamKind::Buffer {
                continue;
            }
            names.push(name.to_string());
            m.push(Tensor::zeros(tensor.shape()));
            v.push(Tensor::zeros(tensor.shape()));
        }
        AdamState { names, m, v, t: 0 }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// The (name, first moment, second moment) triples in store order, for
    /// serialization.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.names
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(n, (m, v))| (n.as_str(), m, v))
    }

    /// Rebuild optimizer state from serialized moments. The triples must
    /// cover the store's trainable entries exactly, in order, with matching
    /// shapes.
    pub fn restore(
        store: &ParamStore,
        moments: &[(String, Tensor, Tensor)],
        t: u64,
    ) -> Result<Self, ModelError> {
        let mut state = AdamState::new(store);
        if moments.len() != state.names.len() {
            return Err(ModelError::ParamSetMismatch {
                reason: format!(
                    "{} optimizer entries for {} trainable parameters",
                    moments.len(),
                    state.names.len()
                ),
            });
        }
        for (i, (name, m, v)) in moments.iter().enumerate() {
            if *name != state.names[i] {
                return Err(ModelError::ParamSetMismatch {
                    reason: format!("optimizer entry {} does not match parameter {}", name, state.names[i]),
                });
            }
            if m.shape() != state.m[i].shape() || v.shape() != state.v[i].shape() {
                return Err(ModelError::ParamSetMismatch {
                    reason: format!("optimizer moments for {name} have the wrong shape"),
                });
            }
            state.m[i] = m.clone();
            state.v[i] = v.clone();
        }
        state.t = t;
        Ok(state)
    }

    /// Round every moment to f32 and back (checkpoint storage precision).
    fn round_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            round_tensor_f32(t);
        }
    }
}

fn round_tensor_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn round_store_f32(store: &mut ParamStore) {
    for (_, t, _) in store.iter_mut() {
        round_tensor_f32(t);
    }
}

/// Round all mutable training state — model parameters, buffers, and
/// optimizer moments — to f32 and back. Files store parameters as f32, so
/// applying the same rounding to the in-memory state at every epoch
/// boundary makes a boundary checkpoint resume bit-exactly: the continued
/// run and the uninterrupted run walk identical floating-point sequences.
fn sync_storage_precision(model: &mut WorldModel, enc: &mut AdamState, dyn_state: &mut AdamState) {
    round_store_f32(&mut model.online);
    round_store_f32(&mut model.target);
    round_store_f32(&mut model.dynamics);
    enc.round_f32();
    dyn_state.round_f32();
}

/// Mid-run state for continuing an interrupted training run.
pub struct TrainResume {
    /// Steps already taken; must sit on an epoch boundary.
    pub start_step: usize,
    pub enc_state: AdamState,
    pub dyn_state: AdamState,
}

/// Everything the epoch callback may want to persist: the full model, the
/// optimizer moments (without which a checkpoint could not resume
/// mid-schedule), and the log so far.
pub struct EpochEnd<'a> {
    /// 1-based index of the epoch that just finished.
    pub epoch: usize,
    /// Total optimizer steps completed.
    pub global_step: usize,
    pub model: &'a WorldModel,
    pub enc_state: &'a AdamState,
    pub dyn_state: &'a AdamState,
    pub log: &'a [TrainLogRow],
}

/// One AdamW update: bias-corrected moments, then
/// `θ ← θ − lr · (m̂ / (sqrt(v̂) + ε) + wd · θ)` — with the decoupled decay
/// term applied only to `Weight`-kind parameters, never to biases, gains, or
/// normalization affines.
pub fn adamw_step(
    opt: &AdamW,
    store: &mut ParamStore,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    wd: f64,
) -> Result<(), ModelError> {
    if grads.len() != state.names.len() {
        return Err(ModelError::ParamSetMismatch {
            reason: format!("{} gradients for {} states", grads.len(), state.names.len()),
        });
    }
    for (g, name) in grads.iter().zip(&state.names) {
        if g.0 != *name {
            return Err(ModelError::ParamSetMismatch {
                reason: format!("gradient {} does not line up with state {}", g.0, name),
            });
        }
        if !g.1.all_finite() {
            return Err(ModelError::Numerics(NumericsError::NonFinite {
                context: format!("gradient of {name}"),
            }));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    for (i, (name, grad)) in grads.iter().enumerate() {
        let decay = if store.kind(name) == ParamKind::Weight { wd } else { 0.0 };
        let p = store.get_mut(name);
        let pd = p.data_mut();
        let md = state.m[i].data_mut();
        let vd = state.v[i].data_mut();
        let gd = grad.data();
        for j in 0..pd.len() {
            md[j] = opt.beta1 * md[j] + (1.0 - opt.beta1) * gd[j];
            vd[j] = opt.beta2 * vd[j] + (1.0 - opt.beta2) * gd[j] * gd[j];
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] -= lr * (mhat / (vhat.sqrt() + opt.eps) + decay * pd[j]);
        }
    }
    Ok(())
}

/// Scale all gradients by `clip / norm` when their joint global norm
/// exceeds `clip`. Returns the pre-clip norm.
pub fn clip_global_norm(groups: &mut [&mut Vec<(String, Tensor)>], clip: f64) -> f64 {
    let mut sq = 0.0;
    for group in groups.iter() {
        for (_, g) in group.iter() {
            for &v in g.data() {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for group in groups.iter_mut() {
            for (_, g) in group.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub wd: f64,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

pub const LOG_CSV_HEADER: &str = "step,epoch,lr,wd,tf,roll,var,cov,idm,total,seconds";

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.3}",
            self.step,
            self.epoch,
            self.lr,
            self.wd,
            self.loss.tf,
            self.loss.roll,
            self.loss.var,
            self.loss.cov,
            self.loss.idm,
            self.loss.total,
            self.seconds
        )
    }
}

/// Write the log as CSV (atomically; partial files never appear).
pub fn write_log_csv(path: &Path, rows: &[TrainLogRow]) -> Result<(), DataError> {
    let mut out = String::with_capacity(rows.len() * 96 + 64);
    out.push_str(LOG_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Optimizer steps per epoch: one epoch draws as many batches as it takes
/// to visit roughly every rollout segment once, `ceil(segments / K)`, where
/// a trajectory of `L` snapshots contributes `L - H` segment starts.
pub fn steps_per_epoch(dataset: &Dataset, cfg: &TrainConfig) -> usize {
    let segments: usize = dataset
        .trajectories
        .iter()
        .map(|t| t.snapshots.len().saturating_sub(cfg.horizon))
        .sum();
    segments.div_ceil(cfg.batch_k).max(1)
}

/// Preprocess one snapshot into a (2, rows, taps) model input.
fn snapshot_input(
    h: &[f64],
    rows: usize,
    n_sub: usize,
    l_taps: usize,
) -> Tensor {
    let taps = truncate_delay(h, rows, n_sub, l_taps).expect("tap count validated before training");
    to_model_input(&taps, rows, l_taps)
}

struct StepTensors {
    x_online: Tensor,
    x_target: Tensor,
    actions: Vec<Tensor>,
}

/// Assemble one step's batch: time-major inputs (row `t*K + b`), masked for
/// the online branch, clean for the target branch.
fn assemble_batch(
    dataset: &Dataset,
    preproc: &PreprocConfig,
    segments: &[(usize, usize)],
    horizon: usize,
    step_seed: u64,
) -> StepTensors {
    let rows = dataset.b * dataset.m;
    let l = preproc.l_taps;
    let k = segments.len();
    let plane = 2 * rows * l;
    let mut x_online = Tensor::zeros(&[(horizon + 1) * k, 2, rows, l]);
    let mut x_target = Tensor::zeros(&[(horizon + 1) * k, 2, rows, l]);
    let mut actions: Vec<Tensor> = (0..horizon).map(|_| Tensor::zeros(&[k, 2])).collect();

    for (b, &(ti, start)) in segments.iter().enumerate() {
        let traj = &dataset.trajectories[ti];
        let mut seg: Vec<Tensor> = (0..=horizon)
            .map(|j| snapshot_input(&traj.snapshots[start + j].h, rows, dataset.n_sub, l))
            .collect();
        for (j, t) in seg.iter().enumerate() {
            let row = j * k + b;
            x_target.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(t.data());
        }
        tube_mask(&mut seg, preproc.mask_ratio, derive_seed(step_seed, "mask", b as u64));
        for (j, t) in seg.iter().enumerate() {
            let row = j * k + b;
            x_online.data_mut()[row * plane..(row + 1) * plane].copy_from_slice(t.data());
        }
        for (j, slot) in actions.iter_mut().enumerate() {
            let a = traj.actions[start + j];
            slot.data_mut()[b * 2] = a[0];
            slot.data_mut()[b * 2 + 1] = a[1];
        }
    }
    StepTensors { x_online, x_target, actions }
}

/// Fold one forward pass's batch statistics into the running buffers:
/// `r ← (1 - momentum) · r + momentum · stat`, variance made unbiased.
fn update_bn_buffers(store: &mut ParamStore, g: &Graph, sites: &[BnSite], momentum: f64) {
    for site in sites {
        let saved = g.saved(site.node);
        let (mean, var_biased) = (&saved[0], &saved[1]);
        let corr = if site.count > 1 {
            site.count as f64 / (site.count as f64 - 1.0)
        } else {
            1.0
        };
        let rm = store.get_mut(&format!("{}.running_mean", site.name));
        for (r, &m) in rm.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = store.get_mut(&format!("{}.running_var", site.name));
        for (r, &v) in rv.data_mut().iter_mut().zip(var_biased.data()) {
            *r = (1.0 - momentum) * *r + momentum * v * corr;
        }
    }
}

/// Run the training loop. `on_epoch` fires after every completed epoch —
/// the CLI uses it to write checkpoints, so an abort on a later non-finite
/// loss retains the last epoch's artifact. Returns the full per-step log.
pub fn train(
    model: &mut WorldModel,
    dataset: &Dataset,
    preproc: &PreprocConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    on_epoch: impl FnMut(&EpochEnd) -> Result<(), ModelError>,
) -> Result<Vec<TrainLogRow>, ModelError> {
    train_from(model, dataset, preproc, cfg, weights, None, on_epoch)
}

/// [`train`] with an optional resume point. A resumed run continues the
/// step-seeded RNG streams and the schedules exactly where the original
/// stopped, so it walks the same trajectory the uninterrupted run would
/// have (up to the f32 rounding of checkpointed state). The returned log
/// covers only the newly executed steps.
pub fn train_from(
    model: &mut WorldModel,
    dataset: &Dataset,
    preproc: &PreprocConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    resume: Option<TrainResume>,
    mut on_epoch: impl FnMut(&EpochEnd) -> Result<(), ModelError>,
) -> Result<Vec<TrainLogRow>, ModelError> {
    cfg.validate()?;
    model.cfg.validate()?;
    weights.validate()?;
    preproc
        .validate(dataset.n_sub)
        .map_err(|e| ModelError::InvalidConfig { field: "preprocess".into(), reason: e.to_string() })?;
    if preproc.l_taps != model.cfg.in_taps || dataset.b * dataset.m != model.cfg.in_rows {
        return Err(ModelError::DimMismatch {
            expected: model.cfg.in_rows * model.cfg.in_taps,
            got: dataset.b * dataset.m * preproc.l_taps,
            context: "dataset/preprocessing geometry vs model input shape".into(),
        });
    }

    let per_epoch = steps_per_epoch(dataset, cfg);
    let total_steps = cfg.epochs * per_epoch;
    let eff_weights = cfg.toggles.effective(weights);
    let opt = AdamW::default();
    let (start_epoch, mut enc_state, mut dyn_state) = match resume {
        None => (0, AdamState::new(&model.online), AdamState::new(&model.dynamics)),
        Some(r) => {
            if r.start_step % per_epoch != 0 || r.start_step > total_steps {
                return Err(ModelError::InvalidConfig {
                    field: "resume".into(),
                    reason: format!(
                        "start step {} is not an epoch boundary of {} steps/epoch x {} epochs",
                        r.start_step, per_epoch, cfg.epochs
                    ),
                });
            }
            if r.enc_state.step_count() != r.start_step as u64
                || r.dyn_state.step_count() != r.start_step as u64
            {
                return Err(ModelError::InvalidConfig {
                    field: "resume".into(),
                    reason: "optimizer step counts disagree with the resume point".into(),
                });
            }
            (r.start_step / per_epoch, r.enc_state, r.dyn_state)
        }
    };
    let enc_cfg = model.cfg.encoder.clone();
    let pred_cfg = model.cfg.predictor.clone();
    let d = model.cfg.latent_dim();
    let k = cfg.batch_k;
    let h = cfg.horizon;
    if start_epoch < cfg.epochs {
        // Storage-precision barrier at entry: a fresh run must see the same
        // f32-rounded state a resumed run reads back from its checkpoint.
        // The frozen probe is rounded once here and never moves again.
        sync_storage_precision(model, &mut enc_state, &mut dyn_state);
        round_store_f32(&mut model.idm);
    }
    let idm_fingerprint = model.idm_hash();

    let mut log: Vec<TrainLogRow> = Vec::with_capacity(total_steps - start_epoch * per_epoch);
    let t0 = Instant::now();
    let mut global_step = start_epoch * per_epoch;

    for epoch in start_epoch..cfg.epochs {
        for _ in 0..per_epoch {
            let step_seed = derive_seed(cfg.seed, "step", global_step as u64);
            let lr = lr_schedule(global_step, total_steps, cfg)?;
            let wd = wd_schedule(global_step, total_steps, cfg)?;

            let segments =
                sample_rollout_segments(dataset, h, k, &mut stream(step_seed, "segments", 0))?;
            let batch = assemble_batch(dataset, preproc, &segments, h, step_seed);

            let mut g = Graph::new();
            let on_bound = bind_params(&mut g, &model.online, true);
            let tg_bound = bind_params(&mut g, &model.target, false);
            let dyn_bound = bind_params(&mut g, &model.dynamics, true);
            let idm_bound = bind_params(&mut g, &model.idm, false);

            let x_on = g.constant(batch.x_online);
            let x_tg = g.constant(batch.x_target);
            let enc_on =
                encoder_forward(&mut g, &enc_cfg, &model.online, &on_bound, "enc", x_on, true);
            let enc_tg =
                encoder_forward(&mut g, &enc_cfg, &model.target, &tg_bound, "enc", x_tg, true);

            let online: Vec<NodeId> =
                (0..=h).map(|t| g.slice_rows(enc_on.latent, t * k, k)).collect();
            let target: Vec<NodeId> =
                (0..=h).map(|t| g.slice_rows(enc_tg.latent, t * k, k)).collect();
            let action_nodes: Vec<NodeId> =
                batch.actions.iter().map(|a| g.constant(a.clone())).collect();
            let pred =
                rollout_forward(&mut g, &pred_cfg, &dyn_bound, "dyn", d, online[0], &action_nodes);

            let nodes = RolloutNodes { pred, target, online, actions: action_nodes };
            let ln =
                loss_total(&mut g, &nodes, &eff_weights, &idm_bound, cfg.vicreg_on_target)?;
            let breakdown = LossBreakdown::read(&g, &ln);
            if !breakdown.all_finite() {
                return Err(ModelError::NonFiniteLoss {
                    step: global_step,
                    breakdown: breakdown.to_string(),
                });
            }

            let grads = g.backward(ln.total)?;
            let mut enc_grads = collect_grads(&g, &grads, &model.online, &on_bound);
            let mut dyn_grads = collect_grads(&g, &grads, &model.dynamics, &dyn_bound);
            clip_global_norm(&mut [&mut enc_grads, &mut dyn_grads], cfg.clip_norm);

            adamw_step(&opt, &mut model.online, &enc_grads, &mut enc_state, lr, wd)?;
            adamw_step(&opt, &mut model.dynamics, &dyn_grads, &mut dyn_state, lr, wd)?;
            update_bn_buffers(&mut model.online, &g, &enc_on.bn_sites, enc_cfg.bn_momentum);
            model.ema_update(cfg.ema_decay)?;

            debug_assert_eq!(
                model.idm_hash(),
                idm_fingerprint,
                "the frozen probe must never move"
            );

            log.push(TrainLogRow {
                step: global_step,
                epoch,
                lr,
                wd,
                loss: breakdown,
                seconds: t0.elapsed().as_secs_f64(),
            });
            global_step += 1;
        }
        // Epoch boundaries are storage-precision barriers (see
        // `sync_storage_precision`): the callback and the next epoch both
        // see exactly what a checkpoint written here would restore.
        sync_storage_precision(model, &mut enc_state, &mut dyn_state);
        on_epoch(&EpochEnd {
            epoch: epoch + 1,
            global_step,
            model,
            enc_state: &enc_state,
            dyn_state: &dyn_state,
            log: &log,
        })?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::predictor::PredictorConfig;
    use crate::sim::{generate_trajectory, MotionConfig, SceneConfig};

    /// A small but physically real dataset: `n_traj` trajectories of
    /// `t_steps` transitions each, on a reduced scene (fewer subcarriers to
    /// keep synthesis fast).
    fn toy_dataset(n_traj: usize, t_steps: usize) -> Dataset {
        let scene = SceneConfig { n_sub: 16, ..SceneConfig::default() };
        let motion = MotionConfig::default();
        let trajectories = (0..n_traj)
            .map(|i| generate_trajectory(&scene, &motion, t_steps, 1000 + i as u64).unwrap())
            .collect();
        Dataset { b: scene.b, m: scene.m, n_sub: scene.n_sub, trajectories }
    }

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                depths: vec![1, 1],
                channels: vec![4, 8],
                latent_dim: 8,
                ..EncoderConfig::default()
            },
            predictor: PredictorConfig { hidden: 16, ..PredictorConfig::default() },
            idm_hidden: 16,
            in_rows: 8,
            in_taps: 8,
        }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_k: 4, horizon: 3, seed: 7, ..TrainConfig::default() }
    }

    fn toy_preproc() -> PreprocConfig {
        PreprocConfig { l_taps: 8, mask_ratio: 0.15 }
    }

    #[test]
    fn segment_sampler_counts_valid_starts_per_trajectory() {
        let ds = toy_dataset(1, 5); // 6 snapshots
        let mut rng = stream(1, "segments", 0);
        // Horizon 5: exactly one valid start.
        let segs = sample_rollout_segments(&ds, 5, 10, &mut rng).unwrap();
        assert!(segs.iter().all(|&(t, s)| t == 0 && s == 0), "only (0, 0) is valid");
        // Horizon 6: none.
        assert!(matches!(
            sample_rollout_segments(&ds, 6, 1, &mut rng),
            Err(ModelError::NoValidSegment { .. })
        ));
        // Horizon 2 on 6 snapshots: starts 0..=3, i.e. 6 - 2 = 4 offsets.
        let segs = sample_rollout_segments(&ds, 2, 400, &mut rng).unwrap();
        let max = segs.iter().map(|&(_, s)| s).max().unwrap();
        assert_eq!(max, 3, "start offsets must cover length - horizon - 1");
    }

    #[test]
    fn segment_sampler_is_uniform_over_trajectory_start_pairs() {
        // Two trajectories with 12 and 8 snapshots, horizon 3: 9 + 5 = 14
        // valid pairs. Chi-square of 10^4 draws against uniform must sit
        // below the 99.9th percentile of chi2(13) ~ 34.5.
        let ds = toy_dataset(2, 11); // both length 12 — adjust second below
        let mut ds = ds;
        ds.trajectories[1].snapshots.truncate(8);
        ds.trajectories[1].actions.truncate(7);
        let mut rng = stream(2, "segments", 0);
        let draws = sample_rollout_segments(&ds, 3, 10_000, &mut rng).unwrap();
        let mut counts = vec![0usize; 14];
        for (t, s) in draws {
            let cell = if t == 0 { s } else { 9 + s };
            counts[cell] += 1;
        }
        let expect = 10_000.0 / 14.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 34.5, "chi-square {chi2} too large for a uniform sampler: {counts:?}");
        assert!(counts.iter().all(|&c| c > 0), "every valid pair must be reachable");
    }

    #[test]
    fn segment_sampler_is_deterministic_per_seed() {
        let ds = toy_dataset(2, 20);
        let a = sample_rollout_segments(&ds, 4, 16, &mut stream(3, "segments", 0)).unwrap();
        let b = sample_rollout_segments(&ds, 4, 16, &mut stream(3, "segments", 0)).unwrap();
        let c = sample_rollout_segments(&ds, 4, 16, &mut stream(4, "segments", 0)).unwrap();
        assert_eq!(a, b, "same stream, same draws");
        assert_ne!(a, c, "different seed should draw differently");
    }

    #[test]
    fn learning_rate_schedule_hits_the_three_paper_values() {
        let cfg = TrainConfig::default();
        let total = 1000;
        assert_eq!(lr_schedule(0, total, &cfg).unwrap(), 1e-4, "start");
        let warmup = 50; // ceil(0.05 * 1000)
        assert_eq!(lr_schedule(warmup, total, &cfg).unwrap(), 3e-4, "peak at warmup end");
        let end = lr_schedule(total, total, &cfg).unwrap();
        assert!((end - 1e-6).abs() < 1e-18, "end value {end}");
        assert!(lr_schedule(total + 1, total, &cfg).is_err(), "out of range must fail");
    }

    #[test]
    fn learning_rate_schedule_is_continuous_and_unimodal() {
        let cfg = TrainConfig::default();
        let total = 400;
        let warmup = 20;
        // Both the last warm-up step and the first cosine step evaluate to
        // values bracketing the peak tightly.
        let at = lr_schedule(warmup, total, &cfg).unwrap();
        let just_after = lr_schedule(warmup + 1, total, &cfg).unwrap();
        assert_eq!(at, cfg.lr_peak);
        assert!(just_after < at && at - just_after < 1e-5, "no jump at the junction");
        let mut prev = lr_schedule(0, total, &cfg).unwrap();
        for s in 1..=warmup {
            let v = lr_schedule(s, total, &cfg).unwrap();
            assert!(v >= prev, "warm-up must be non-decreasing");
            prev = v;
        }
        for s in warmup + 1..=total {
            let v = lr_schedule(s, total, &cfg).unwrap();
            assert!(v <= prev, "cosine phase must be non-increasing");
            prev = v;
        }
    }

    #[test]
    fn weight_decay_ramp_is_linear_between_its_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(wd_schedule(0, 100, &cfg).unwrap(), 0.04);
        assert_eq!(wd_schedule(100, 100, &cfg).unwrap(), 0.4);
        let mid = wd_schedule(50, 100, &cfg).unwrap();
        assert!((mid - 0.22).abs() < 1e-15, "midpoint {mid}");
    }

    fn scalar_store(theta: f64, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(theta), kind);
        s
    }

    #[test]
    fn adamw_leaves_parameters_alone_when_gradient_and_decay_are_zero() {
        let mut store = scalar_store(1.5, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        let grads = vec![("w".to_string(), Tensor::scalar(0.0))];
        adamw_step(&AdamW::default(), &mut store, &grads, &mut state, 0.01, 0.0).unwrap();
        assert_eq!(store.get("w").item(), 1.5);
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_weights_but_not_gains() {
        for (kind, expect) in [(ParamKind::Weight, 0.999), (ParamKind::Gain, 1.0)] {
            let mut store = scalar_store(1.0, kind);
            let mut state = AdamState::new(&store);
            let grads = vec![("w".to_string(), Tensor::scalar(0.0))];
            adamw_step(&AdamW::default(), &mut store, &grads, &mut state, 0.01, 0.1).unwrap();
            let got = store.get("w").item();
            assert!(
                (got - expect).abs() < 1e-15,
                "{kind:?} with zero grad, lr 0.01, wd 0.1: got {got}, want {expect}"
            );
        }
    }

    #[test]
    fn adamw_first_step_matches_the_bias_corrected_hand_value() {
        // theta = 0, g = 1, t = 1: mhat = 1, vhat = 1, update = -lr/(1+eps).
        let mut store = scalar_store(0.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        let grads = vec![("w".to_string(), Tensor::scalar(1.0))];
        let lr = 0.002;
        adamw_step(&AdamW::default(), &mut store, &grads, &mut state, lr, 0.0).unwrap();
        let got = store.get("w").item();
        let expect = -lr / (1.0 + 1e-8);
        assert!(
            (got - expect).abs() < 1e-12,
            "first bias-corrected step must be -lr/(1+eps) = {expect}, got {got}"
        );
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut store = scalar_store(0.0, ParamKind::Weight);
        let mut state = AdamState::new(&store);
        let grads = vec![("w".to_string(), Tensor::scalar(f64::NAN))];
        assert!(adamw_step(&AdamW::default(), &mut store, &grads, &mut state, 0.01, 0.0).is_err());
    }

    #[test]
    fn global_norm_clip_rescales_only_oversized_gradients() {
        let mut a = vec![("x".to_string(), Tensor::from_vec(&[2], vec![3.0, 0.0]))];
        let mut b = vec![("y".to_string(), Tensor::from_vec(&[1], vec![4.0]))];
        let norm = clip_global_norm(&mut [&mut a, &mut b], 2.5);
        assert!((norm - 5.0).abs() < 1e-12, "joint norm of (3,0,4) is 5");
        assert!((a[0].1.data()[0] - 1.5).abs() < 1e-12, "scaled by 1/2");
        assert!((b[0].1.data()[0] - 2.0).abs() < 1e-12);
        let mut c = vec![("z".to_string(), Tensor::from_vec(&[1], vec![0.3]))];
        clip_global_norm(&mut [&mut c], 2.5);
        assert_eq!(c[0].1.data()[0], 0.3, "small gradients pass through untouched");
    }

    #[test]
    fn zero_epochs_returns_untouched_parameters_and_an_empty_log() {
        let ds = toy_dataset(1, 8);
        let mut model = WorldModel::new(toy_model_cfg(), 1).unwrap();
        let hash = model.online.content_hash();
        let cfg = TrainConfig { epochs: 0, ..toy_train_cfg() };
        let log = train(&mut model, &ds, &toy_preproc(), &cfg, &LossWeights::default(), |_| {
            panic!("no epoch may complete")
        })
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(model.online.content_hash(), hash);
    }

    #[test]
    fn short_training_run_is_bit_identical_across_reruns() {
        let ds = toy_dataset(2, 10);
        let run = || {
            let mut model = WorldModel::new(toy_model_cfg(), 5).unwrap();
            let cfg = TrainConfig { epochs: 1, ..toy_train_cfg() };
            let log = train(
                &mut model,
                &ds,
                &toy_preproc(),
                &cfg,
                &LossWeights::default(),
                |_| Ok(()),
            )
            .unwrap();
            (
                model.online.content_hash(),
                model.target.content_hash(),
                model.dynamics.content_hash(),
                log.iter().map(|r| r.loss.total.to_bits()).collect::<Vec<_>>(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0, "online parameters must be bit-identical");
        assert_eq!(a.1, b.1, "target parameters must be bit-identical");
        assert_eq!(a.2, b.2, "predictor parameters must be bit-identical");
        assert_eq!(a.3, b.3, "loss sequence must be bit-identical");
    }

    #[test]
    fn training_loss_decreases_on_an_overfit_smoke_run() {
        // One trajectory, tiny model, ~200 steps: the trailing 20-step
        // average of the total loss must land clearly below the opening one.
        let ds = toy_dataset(1, 19);
        let mut model = WorldModel::new(toy_model_cfg(), 11).unwrap();
        let mut cfg = toy_train_cfg();
        cfg.batch_k = 4;
        cfg.horizon = 3;
        // 20 snapshots -> 17 segment starts -> 5 steps per epoch; 40 epochs
        // = 200 steps.
        cfg.epochs = 40;
        let log = train(&mut model, &ds, &toy_preproc(), &cfg, &LossWeights::default(), |_| Ok(()))
        .unwrap();
        assert_eq!(log.len(), 200, "expected 5 steps/epoch over 40 epochs");
        let head: f64 = log[..20].iter().map(|r| r.loss.total).sum::<f64>() / 20.0;
        let tail: f64 = log[log.len() - 20..].iter().map(|r| r.loss.total).sum::<f64>() / 20.0;
        assert!(
            tail < head,
            "optimization must make progress: first-20 avg {head:.4}, last-20 avg {tail:.4}"
        );
        for w in log.windows(2) {
            assert!(w[1].step == w[0].step + 1, "log steps must be monotone");
        }
    }

    #[test]
    fn target_encoder_follows_the_unrolled_ema_recursion() {
        // One step per epoch, so the epoch callback observes the online
        // parameters right after every optimizer step. The final target must
        // equal the EMA recursion unrolled from initialization over exactly
        // those observations — up to the f32 rounding applied at every
        // epoch-boundary storage-precision barrier, so within 1e-6 rather
        // than machine precision.
        let ds = toy_dataset(1, 6); // 7 snapshots, 4 segment starts → 1 step/epoch
        let cfg = TrainConfig { epochs: 3, ..toy_train_cfg() };
        assert_eq!(steps_per_epoch(&ds, &cfg), 1, "test geometry needs one step per epoch");
        let decay = cfg.ema_decay;
        let mut model = WorldModel::new(toy_model_cfg(), 13).unwrap();
        let flatten = |s: &crate::params::ParamStore| -> Vec<f64> {
            s.iter().flat_map(|(_, t, _)| t.data().to_vec()).collect()
        };
        let init: Vec<f64> = flatten(&model.online)
            .into_iter()
            .map(|v| v as f32 as f64) // the entry barrier rounds initialization
            .collect();
        let mut per_step: Vec<Vec<f64>> = Vec::new();
        train(&mut model, &ds, &toy_preproc(), &cfg, &LossWeights::default(), |p| {
            per_step.push(flatten(&p.model.online));
            Ok(())
        })
        .unwrap();
        assert_eq!(per_step.len(), 3);

        // Unroll: target_t = decay * target_{t-1} + (1 - decay) * online_t.
        let mut expect = init;
        for online in &per_step {
            for (e, o) in expect.iter_mut().zip(online) {
                *e = decay * *e + (1.0 - decay) * o;
            }
        }
        let got = flatten(&model.target);
        let worst = expect
            .iter()
            .zip(&got)
            .map(|(e, g)| (e - g).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6, "EMA recursion mismatch: worst abs err {worst}");
    }

    #[test]
    fn resuming_from_an_epoch_boundary_matches_the_uninterrupted_run_exactly() {
        let ds = toy_dataset(1, 6); // 4 segment starts → 1 step/epoch
        let cfg = TrainConfig { epochs: 3, ..toy_train_cfg() };
        let weights = LossWeights::default();

        let mut full = WorldModel::new(toy_model_cfg(), 23).unwrap();
        let full_log =
            train(&mut full, &ds, &toy_preproc(), &cfg, &weights, |_| Ok(())).unwrap();

        // Interrupt an identical run at the end of epoch 1 by failing the
        // callback; the model keeps its barrier-synchronized state and the
        // captured optimizer moments stand in for a checkpoint.
        let mut broken = WorldModel::new(toy_model_cfg(), 23).unwrap();
        let mut captured: Option<(usize, AdamState, AdamState)> = None;
        let err = train(&mut broken, &ds, &toy_preproc(), &cfg, &weights, |end| {
            captured = Some((end.global_step, end.enc_state.clone(), end.dyn_state.clone()));
            Err(ModelError::InvalidConfig { field: "stop".into(), reason: "interrupt".into() })
        })
        .unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig { .. }));
        let (start_step, enc_state, dyn_state) = captured.unwrap();
        assert_eq!(start_step, 1, "interrupted after the first epoch");

        let resume = TrainResume { start_step, enc_state, dyn_state };
        let tail_log = train_from(
            &mut broken,
            &ds,
            &toy_preproc(),
            &cfg,
            &weights,
            Some(resume),
            |_| Ok(()),
        )
        .unwrap();

        assert_eq!(
            (
                broken.online.content_hash(),
                broken.target.content_hash(),
                broken.dynamics.content_hash()
            ),
            (
                full.online.content_hash(),
                full.target.content_hash(),
                full.dynamics.content_hash()
            ),
            "resumed run must land on bit-identical parameters"
        );
        assert_eq!(tail_log.len(), 2, "two epochs remained");
        for (a, b) in full_log[1..].iter().zip(&tail_log) {
            assert_eq!(a.step, b.step);
            assert_eq!(
                a.loss.total.to_bits(),
                b.loss.total.to_bits(),
                "step {} loss must be bit-identical after resume",
                a.step
            );
        }
    }

    #[test]
    fn disabling_a_loss_equals_zeroing_its_weight() {
        let ds = toy_dataset(1, 6);
        let run = |toggles: LossToggles, weights: LossWeights| {
            let mut model = WorldModel::new(toy_model_cfg(), 17).unwrap();
            let cfg = TrainConfig { epochs: 2, toggles, ..toy_train_cfg() };
            train(&mut model, &ds, &toy_preproc(), &cfg, &weights, |_| Ok(())).unwrap();
            (model.online.content_hash(), model.dynamics.content_hash())
        };
        let toggled = run(
            LossToggles { var: false, cov: false, ..LossToggles::default() },
            LossWeights::default(),
        );
        let zeroed = run(
            LossToggles::default(),
            LossWeights { var: 0.0, cov: 0.0, ..LossWeights::default() },
        );
        assert_eq!(toggled, zeroed, "toggles and zero weights must walk the same trajectory");
    }

    #[test]
    fn frozen_probe_and_running_buffers_behave_during_training() {
        let ds = toy_dataset(1, 6);
        let mut model = WorldModel::new(toy_model_cfg(), 19).unwrap();
        // The entry barrier rounds the probe to f32 once; beyond that it
        // must never move, so its hash must match the rounded initialization.
        let mut rounded = model.idm.clone();
        round_store_f32(&mut rounded);
        let idm_expected = rounded.content_hash();
        let bufs_before = model.online.get("enc.s0.b0.bn1.running_mean").clone();
        let cfg = TrainConfig { epochs: 2, ..toy_train_cfg() };
        train(&mut model, &ds, &toy_preproc(), &cfg, &LossWeights::default(), |_| Ok(()))
            .unwrap();
        assert_eq!(model.idm_hash(), idm_expected, "frozen probe must not move");
        let bufs_after = model.online.get("enc.s0.b0.bn1.running_mean");
        assert!(
            bufs_before.max_abs_diff(bufs_after) > 0.0,
            "running statistics must update during training"
        );
    }

    #[test]
    fn epoch_callback_fires_once_per_epoch_with_a_growing_log() {
        let ds = toy_dataset(1, 6);
        let mut model = WorldModel::new(toy_model_cfg(), 23).unwrap();
        let cfg = TrainConfig { epochs: 3, ..toy_train_cfg() };
        let mut seen = Vec::new();
        train(&mut model, &ds, &toy_preproc(), &cfg, &LossWeights::default(), |p| {
            seen.push((p.epoch, p.log.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn log_csv_round_trips_through_disk() {
        let rows = vec![TrainLogRow {
            step: 0,
            epoch: 0,
            lr: 1e-4,
            wd: 0.04,
            loss: LossBreakdown { tf: 1.0, roll: 2.0, var: 0.5, cov: 0.25, idm: 0.125, total: 8.0 },
            seconds: 1.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), LOG_CSV_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,0,"), "row {row}");
        assert!(row.contains("8.00000000e0"), "total loss must appear in the row: {row}");
    }
}
