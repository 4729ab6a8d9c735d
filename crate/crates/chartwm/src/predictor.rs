//! Latent dynamics: the matrix-exponential predictor and three baselines.
//!
//! The flagship predictor is *homomorphic*: a two-layer GeLU network maps
//! each planar action `a ∈ R^2` to a generator matrix `G(a) ∈ R^{D×D}`, and
//! one step of latent dynamics applies the group element `exp(G(a))` to the
//! latent by left multiplication. Multi-step prediction is therefore a
//! product of matrices — earliest action applied first:
//!
//! ```text
//! ẑ_{t+h} = exp(G(a_{t+h-1})) · … · exp(G(a_{t+1})) · exp(G(a_t)) · z_t
//! ```
//!
//! Composition holds *by construction*: rolling forward `h` steps is
//! bit-identical to folding `h` single steps, because both execute the same
//! operation sequence.
//!
//! Baselines sharing the same interface:
//! * `mlp` — a two-layer GeLU network on `[z, a]` predicting the next latent
//!   directly (all-zero weights predict the zero vector);
//! * `film` — `z' = z + γ(a) ⊙ z + β(a)` with tiny conditioning networks
//!   (all-zero weights give the identity map);
//! * `gru` — a single gated recurrent cell driven by the action, in the
//!   convention `z' = (1 - u) ⊙ z + u ⊙ n`, so forcing the update gate `u`
//!   to zero leaves the latent unchanged.
//!
//! The inverse-dynamics head lives here too: a two-layer ReLU network from
//! `[z_t, z_{t+1}]` to the action, randomly initialized and *frozen* — it is
//! a fixed probe that the encoder must organize its latents around.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::graph::{Graph, NodeId};
use crate::params::{bind_params, Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Which latent-dynamics family to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Homomorphic,
    Mlp,
    Film,
    Gru,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Hidden width of the action-conditioned networks.
    pub hidden: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { kind: PredictorKind::Homomorphic, hidden: 64 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 {
            return Err(ModelError::InvalidConfig {
                field: "predictor hidden".into(),
                reason: "hidden width must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Dimensionality of a planar action.
pub const ACTION_DIM: usize = 2;

fn lecun(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    t.fill_normal(rng, (1.0 / fan_in as f64).sqrt());
}

fn he(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    t.fill_normal(rng, (2.0 / fan_in as f64).sqrt());
}

/// Create the parameters of the configured predictor family under `prefix`.
///
/// Action-conditioned *residual* maps (the generator network and the FiLM
/// conditioners) get their final layer scaled by 1e-2, so dynamics start
/// near the identity and early training cannot fling latents apart. The
/// direct-prediction MLP baseline has no identity structure to protect and
/// uses standard initialization.
pub fn init_predictor_params(
    cfg: &PredictorConfig,
    d: usize,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let h = cfg.hidden;
    match cfg.kind {
        PredictorKind::Homomorphic => {
            let mut l1 = Tensor::zeros(&[ACTION_DIM, h]);
            he(&mut l1, ACTION_DIM, rng);
            store.insert(&format!("{prefix}.gen.l1.w"), l1, ParamKind::Weight);
            store.insert(&format!("{prefix}.gen.l1.b"), Tensor::zeros(&[h]), ParamKind::Gain);
            let mut l2 = Tensor::zeros(&[h, d * d]);
            he(&mut l2, h, rng);
            let l2 = l2.scale(1e-2);
            store.insert(&format!("{prefix}.gen.l2.w"), l2, ParamKind::Weight);
            store.insert(&format!("{prefix}.gen.l2.b"), Tensor::zeros(&[d * d]), ParamKind::Gain);
        }
        PredictorKind::Mlp => {
            let mut l1 = Tensor::zeros(&[d + ACTION_DIM, h]);
            he(&mut l1, d + ACTION_DIM, rng);
            store.insert(&format!("{prefix}.mlp.l1.w"), l1, ParamKind::Weight);
            store.insert(&format!("{prefix}.mlp.l1.b"), Tensor::zeros(&[h]), ParamKind::Gain);
            let mut l2 = Tensor::zeros(&[h, d]);
            he(&mut l2, h, rng);
            store.insert(&format!("{prefix}.mlp.l2.w"), l2, ParamKind::Weight);
            store.insert(&format!("{prefix}.mlp.l2.b"), Tensor::zeros(&[d]), ParamKind::Gain);
        }
        PredictorKind::Film => {
            for net in ["gamma", "beta"] {
                let mut l1 = Tensor::zeros(&[ACTION_DIM, h]);
                he(&mut l1, ACTION_DIM, rng);
                store.insert(&format!("{prefix}.film.{net}.l1.w"), l1, ParamKind::Weight);
                store.insert(
                    &format!("{prefix}.film.{net}.l1.b"),
                    Tensor::zeros(&[h]),
                    ParamKind::Gain,
                );
                let mut l2 = Tensor::zeros(&[h, d]);
                he(&mut l2, h, rng);
                let l2 = l2.scale(1e-2);
                store.insert(&format!("{prefix}.film.{net}.l2.w"), l2, ParamKind::Weight);
                store.insert(
                    &format!("{prefix}.film.{net}.l2.b"),
                    Tensor::zeros(&[d]),
                    ParamKind::Gain,
                );
            }
        }
        PredictorKind::Gru => {
            for gate in ["u", "r"] {
                let mut w = Tensor::zeros(&[ACTION_DIM, d]);
                lecun(&mut w, ACTION_DIM, rng);
                store.insert(&format!("{prefix}.gru.{gate}.w"), w, ParamKind::Weight);
                let mut u = Tensor::zeros(&[d, d]);
                lecun(&mut u, d, rng);
                store.insert(&format!("{prefix}.gru.{gate}.u"), u, ParamKind::Weight);
                store.insert(&format!("{prefix}.gru.{gate}.b"), Tensor::zeros(&[d]), ParamKind::Gain);
            }
            let mut w = Tensor::zeros(&[ACTION_DIM, d]);
            lecun(&mut w, ACTION_DIM, rng);
            store.insert(&format!("{prefix}.gru.n.w"), w, ParamKind::Weight);
            let mut u = Tensor::zeros(&[d, d]);
            lecun(&mut u, d, rng);
            store.insert(&format!("{prefix}.gru.n.u"), u, ParamKind::Weight);
            store.insert(&format!("{prefix}.gru.n.bi"), Tensor::zeros(&[d]), ParamKind::Gain);
            store.insert(&format!("{prefix}.gru.n.bh"), Tensor::zeros(&[d]), ParamKind::Gain);
        }
    }
}

/// Create the frozen inverse-dynamics head: `[z_t, z_{t+1}] -> action`.
pub fn init_idm_params(
    d: usize,
    hidden: usize,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) {
    let mut l1 = Tensor::zeros(&[2 * d, hidden]);
    he(&mut l1, 2 * d, rng);
    store.insert(&format!("{prefix}.l1.w"), l1, ParamKind::Weight);
    store.insert(&format!("{prefix}.l1.b"), Tensor::zeros(&[hidden]), ParamKind::Gain);
    let mut l2 = Tensor::zeros(&[hidden, ACTION_DIM]);
    he(&mut l2, hidden, rng);
    store.insert(&format!("{prefix}.l2.w"), l2, ParamKind::Weight);
    store.insert(&format!("{prefix}.l2.b"), Tensor::zeros(&[ACTION_DIM]), ParamKind::Gain);
}

/// Column concatenation of two (N, ·) matrices, built from the row primitives.
fn concat_cols(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let ta = g.transpose(a);
    let tb = g.transpose(b);
    let cat = g.concat_rows(&[ta, tb]);
    g.transpose(cat)
}

/// Generator network: actions (K, 2) -> flattened generators (K, D*D).
pub fn generator_forward(g: &mut Graph, bound: &Bound, prefix: &str, a: NodeId) -> NodeId {
    let w1 = bound.id(&format!("{prefix}.gen.l1.w"));
    let b1 = bound.id(&format!("{prefix}.gen.l1.b"));
    let w2 = bound.id(&format!("{prefix}.gen.l2.w"));
    let b2 = bound.id(&format!("{prefix}.gen.l2.b"));
    let h = g.matmul(a, w1);
    let h = g.add_row_vec(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    g.add_row_vec(out, b2)
}

/// Evaluate the generator matrix `G(a)` for one action, outside any
/// training graph — used by diagnostics and the rollout entry point.
pub fn generator_matrix(store: &ParamStore, prefix: &str, d: usize, a: [f64; 2]) -> Tensor {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, store, false);
    let an = g.constant(Tensor::from_vec(&[1, ACTION_DIM], vec![a[0], a[1]]));
    let gen = generator_forward(&mut g, &bound, prefix, an);
    g.value(gen).reshaped(&[d, d])
}

fn mlp_step(g: &mut Graph, bound: &Bound, prefix: &str, z: NodeId, a: NodeId) -> NodeId {
    let za = concat_cols(g, z, a);
    let w1 = bound.id(&format!("{prefix}.mlp.l1.w"));
    let b1 = bound.id(&format!("{prefix}.mlp.l1.b"));
    let w2 = bound.id(&format!("{prefix}.mlp.l2.w"));
    let b2 = bound.id(&format!("{prefix}.mlp.l2.b"));
    let h = g.matmul(za, w1);
    let h = g.add_row_vec(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    g.add_row_vec(out, b2)
}

fn film_net(g: &mut Graph, bound: &Bound, prefix: &str, net: &str, a: NodeId) -> NodeId {
    let w1 = bound.id(&format!("{prefix}.film.{net}.l1.w"));
    let b1 = bound.id(&format!("{prefix}.film.{net}.l1.b"));
    let w2 = bound.id(&format!("{prefix}.film.{net}.l2.w"));
    let b2 = bound.id(&format!("{prefix}.film.{net}.l2.b"));
    let h = g.matmul(a, w1);
    let h = g.add_row_vec(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    g.add_row_vec(out, b2)
}

fn film_step(g: &mut Graph, bound: &Bound, prefix: &str, z: NodeId, a: NodeId) -> NodeId {
    let gamma = film_net(g, bound, prefix, "gamma", a);
    let beta = film_net(g, bound, prefix, "beta", a);
    let scaled = g.mul(gamma, z);
    let sum = g.add(z, scaled);
    g.add(sum, beta)
}

fn gru_step(g: &mut Graph, bound: &Bound, prefix: &str, z: NodeId, a: NodeId) -> NodeId {
    let gate = |g: &mut Graph, name: &str, z: NodeId, a: NodeId| {
        let w = bound.id(&format!("{prefix}.gru.{name}.w"));
        let u = bound.id(&format!("{prefix}.gru.{name}.u"));
        let b = bound.id(&format!("{prefix}.gru.{name}.b"));
        let aw = g.matmul(a, w);
        let zu = g.matmul(z, u);
        let s = g.add(aw, zu);
        let s = g.add_row_vec(s, b);
        g.sigmoid(s)
    };
    let u = gate(g, "u", z, a);
    let r = gate(g, "r", z, a);

    let wn = bound.id(&format!("{prefix}.gru.n.w"));
    let un = bound.id(&format!("{prefix}.gru.n.u"));
    let bi = bound.id(&format!("{prefix}.gru.n.bi"));
    let bh = bound.id(&format!("{prefix}.gru.n.bh"));
    let zun = g.matmul(z, un);
    let zun = g.add_row_vec(zun, bh);
    let gated = g.mul(r, zun);
    let awn = g.matmul(a, wn);
    let awn = g.add_row_vec(awn, bi);
    let pre = g.add(awn, gated);
    let n = g.tanh(pre);

    // z' = (1 - u) ⊙ z + u ⊙ n  =  z - u ⊙ z + u ⊙ n
    let uz = g.mul(u, z);
    let keep = g.sub(z, uz);
    let un_ = g.mul(u, n);
    g.add(keep, un_)
}

/// Roll latents forward through a sequence of actions.
///
/// `z0` is (K, D); each entry of `actions` is (K, 2) — the shared action for
/// step `i` across the K parallel segments. Returns one (K, D) node per
/// step, in time order. The homomorphic family computes a per-sample matrix
/// exponential; the baselines are plain batched maps.
pub fn rollout_forward(
    g: &mut Graph,
    cfg: &PredictorConfig,
    bound: &Bound,
    prefix: &str,
    d: usize,
    z0: NodeId,
    actions: &[NodeId],
) -> Vec<NodeId> {
    let (k, zd) = g.value(z0).dims2();
    assert_eq!(zd, d, "latent width mismatch in rollout");
    let mut out = Vec::with_capacity(actions.len());
    match cfg.kind {
        PredictorKind::Homomorphic => {
            // Per-sample latent rows, advanced by left-multiplication with
            // exp(G): for row vectors that is z · exp(G)^T.
            let mut rows: Vec<NodeId> = (0..k).map(|b| g.slice_rows(z0, b, 1)).collect();
            for &a in actions {
                let gens = generator_forward(g, bound, prefix, a);
                for (b, row) in rows.iter_mut().enumerate() {
                    let gb = g.slice_rows(gens, b, 1);
                    let gb = g.reshape(gb, &[d, d]);
                    let eb = g.expm(gb);
                    let et = g.transpose(eb);
                    *row = g.matmul(*row, et);
                }
                out.push(g.concat_rows(&rows));
            }
        }
        PredictorKind::Mlp => {
            let mut z = z0;
            for &a in actions {
                z = mlp_step(g, bound, prefix, z, a);
                out.push(z);
            }
        }
        PredictorKind::Film => {
            let mut z = z0;
            for &a in actions {
                z = film_step(g, bound, prefix, z, a);
                out.push(z);
            }
        }
        PredictorKind::Gru => {
            let mut z = z0;
            for &a in actions {
                z = gru_step(g, bound, prefix, z, a);
                out.push(z);
            }
        }
    }
    out
}

/// Inverse-dynamics head: `[z_t, z_{t+1}] (K, 2D) -> action estimate (K, 2)`.
pub fn idm_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    z_t: NodeId,
    z_next: NodeId,
) -> NodeId {
    let zz = concat_cols(g, z_t, z_next);
    let w1 = bound.id(&format!("{prefix}.l1.w"));
    let b1 = bound.id(&format!("{prefix}.l1.b"));
    let w2 = bound.id(&format!("{prefix}.l2.w"));
    let b2 = bound.id(&format!("{prefix}.l2.b"));
    let h = g.matmul(zz, w1);
    let h = g.add_row_vec(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    g.add_row_vec(out, b2)
}
