//! World-model assembly: encoder pair, latent dynamics, and the frozen
//! inverse-dynamics probe, owned as four named parameter stores.
//!
//! * `online` — the trained encoder (prefix `enc`);
//! * `target` — its exponential-moving-average copy, same names, never
//!   touched by the optimizer; prediction targets come from here so the
//!   representation cannot collapse by chasing itself;
//! * `dynamics` — the configured predictor family (prefix `dyn`);
//! * `idm` — the frozen random inverse-dynamics head (prefix `idm`).
//!
//! The training graph is assembled by the trainer from the building blocks
//! in [`crate::encoder`] and [`crate::predictor`]; this module owns the
//! parameters, the evaluation-mode entry points, and the EMA update.

use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, init_encoder_params, EncoderConfig};
use crate::error::ModelError;
use crate::graph::{Graph, NodeId};
use crate::params::{bind_params, ParamStore};
use crate::predictor::{
    generator_matrix, init_idm_params, init_predictor_params, rollout_forward, PredictorConfig,
    PredictorKind,
};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Number of input planes the encoder consumes (magnitude-like and
/// phase-like delay-domain images).
pub const INPUT_PLANES: usize = 2;

/// Evaluation-mode encodes are built in graphs of at most this many samples
/// to bound peak memory; results are row-independent, so chunking is
/// invisible.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    /// Hidden width of the frozen inverse-dynamics head.
    pub idm_hidden: usize,
    /// Input image height: one row per base-station antenna.
    pub in_rows: usize,
    /// Input image width: retained delay taps.
    pub in_taps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            idm_hidden: 64,
            in_rows: 8,
            in_taps: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.predictor.validate()?;
        if self.idm_hidden == 0 {
            return Err(ModelError::InvalidConfig {
                field: "idm_hidden".into(),
                reason: "hidden width must be positive".into(),
            });
        }
        if self.in_rows == 0 || self.in_taps == 0 {
            return Err(ModelError::InvalidConfig {
                field: "input shape".into(),
                reason: format!("got {} rows x {} taps", self.in_rows, self.in_taps),
            });
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }
}

/// The assembled world model.
pub struct WorldModel {
    pub cfg: ModelConfig,
    pub online: ParamStore,
    pub target: ParamStore,
    pub dynamics: ParamStore,
    pub idm: ParamStore,
}

impl WorldModel {
    /// Initialize all parameters from a master seed. Each component draws
    /// from its own named stream, so e.g. changing the predictor family
    /// cannot shift the encoder initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.latent_dim();
        let mut online = ParamStore::new();
        init_encoder_params(
            &cfg.encoder,
            INPUT_PLANES,
            "enc",
            &mut online,
            &mut stream(seed, "encoder-init", 0),
        );
        let target = online.clone();
        let mut dynamics = ParamStore::new();
        init_predictor_params(
            &cfg.predictor,
            d,
            "dyn",
            &mut dynamics,
            &mut stream(seed, "predictor-init", 0),
        );
        let mut idm = ParamStore::new();
        init_idm_params(d, cfg.idm_hidden, "idm", &mut idm, &mut stream(seed, "idm-init", 0));
        Ok(WorldModel { cfg, online, target, dynamics, idm })
    }

    /// Pull the target encoder toward the online encoder:
    /// `target = decay * target + (1 - decay) * online`, buffers included.
    pub fn ema_update(&mut self, decay: f64) -> Result<(), ModelError> {
        self.target.ema_from(&self.online, decay)
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dims4();
        if c != INPUT_PLANES || h != self.cfg.in_rows || w != self.cfg.in_taps {
            return Err(ModelError::DimMismatch {
                expected: INPUT_PLANES * self.cfg.in_rows * self.cfg.in_taps,
                got: c * h * w,
                context: format!(
                    "expected (N, {INPUT_PLANES}, {}, {}), got (N, {c}, {h}, {w})",
                    self.cfg.in_rows, self.cfg.in_taps
                ),
            });
        }
        Ok(())
    }

    /// Encode a batch in evaluation mode (running statistics, per-sample
    /// normalization): (N, 2, rows, taps) -> (N, D). `use_target` selects
    /// the EMA encoder instead of the online one.
    pub fn encode_eval(&self, x: &Tensor, use_target: bool) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let store = if use_target { &self.target } else { &self.online };
        let (n, c, h, w) = x.dims4();
        let d = self.cfg.latent_dim();
        let mut out = Tensor::zeros(&[n, d]);
        let plane = c * h * w;
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let mut chunk = Tensor::zeros(&[len, c, h, w]);
            chunk
                .data_mut()
                .copy_from_slice(&x.data()[start * plane..(start + len) * plane]);
            let mut g = Graph::new();
            let bound = bind_params(&mut g, store, false);
            let xid = g.constant(chunk);
            let enc = encoder_forward(&mut g, &self.cfg.encoder, store, &bound, "enc", xid, false);
            out.data_mut()[start * d..(start + len) * d]
                .copy_from_slice(g.value(enc.latent).data());
            start += len;
        }
        Ok(out)
    }

    /// Roll a single latent forward through a sequence of actions in
    /// evaluation mode. Returns an (H, D) tensor of predicted latents, one
    /// row per step, earliest first.
    pub fn rollout_latent(
        &self,
        z0: &[f64],
        actions: &[[f64; 2]],
    ) -> Result<Tensor, ModelError> {
        let d = self.cfg.latent_dim();
        if z0.len() != d {
            return Err(ModelError::DimMismatch {
                expected: d,
                got: z0.len(),
                context: "rollout start latent".into(),
            });
        }
        let h = actions.len();
        let mut out = Tensor::zeros(&[h, d]);
        if h == 0 {
            return Ok(out);
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.dynamics, false);
        let zn = g.constant(Tensor::from_vec(&[1, d], z0.to_vec()));
        let act: Vec<NodeId> = actions
            .iter()
            .map(|a| g.constant(Tensor::from_vec(&[1, 2], vec![a[0], a[1]])))
            .collect();
        let steps = rollout_forward(&mut g, &self.cfg.predictor, &bound, "dyn", d, zn, &act);
        for (i, id) in steps.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.value(*id).data());
        }
        Ok(out)
    }

    /// The generator matrix `G(a)` for one action — homomorphic family only.
    pub fn generator(&self, a: [f64; 2]) -> Result<Tensor, ModelError> {
        if self.cfg.predictor.kind != PredictorKind::Homomorphic {
            return Err(ModelError::InvalidConfig {
                field: "predictor".into(),
                reason: "generator matrices exist only for the homomorphic family".into(),
            });
        }
        Ok(generator_matrix(&self.dynamics, "dyn", self.cfg.latent_dim(), a))
    }

    /// Fingerprint of the frozen inverse-dynamics head; training must never
    /// change it.
    pub fn idm_hash(&self) -> u64 {
        self.idm.content_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorKind;

    fn tiny_model(seed: u64) -> WorldModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                depths: vec![1, 1],
                channels: vec![3, 4],
                latent_dim: 4,
                ..EncoderConfig::default()
            },
            predictor: PredictorConfig { hidden: 8, ..PredictorConfig::default() },
            idm_hidden: 8,
            in_rows: 8,
            in_taps: 16,
        };
        WorldModel::new(cfg, seed).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut x = Tensor::zeros(&[n, 2, 8, 16]);
        x.fill_normal(&mut stream(seed, "model-test-input", 0), 1.0);
        x
    }

    #[test]
    fn construction_is_deterministic_and_seed_sensitive() {
        let a = tiny_model(42);
        let b = tiny_model(42);
        let c = tiny_model(43);
        assert_eq!(a.online.content_hash(), b.online.content_hash());
        assert_eq!(a.dynamics.content_hash(), b.dynamics.content_hash());
        assert_eq!(a.idm.content_hash(), b.idm.content_hash());
        assert_ne!(a.online.content_hash(), c.online.content_hash());
    }

    #[test]
    fn target_encoder_starts_as_an_exact_copy_of_the_online_encoder() {
        let m = tiny_model(1);
        assert_eq!(m.online.content_hash(), m.target.content_hash());
    }

    #[test]
    fn ema_update_moves_target_by_one_minus_decay() {
        let mut m = tiny_model(2);
        let name = "enc.head.b";
        m.online.get_mut(name).data_mut()[0] = 1.0;
        m.ema_update(0.9995).unwrap();
        let moved = m.target.get(name).data()[0];
        assert!(
            (moved - 0.0005).abs() < 1e-15,
            "target must move from 0 toward 1 by 1 - decay, got {moved}"
        );
        // Decay 1.0 freezes the target entirely.
        let before = m.target.content_hash();
        m.ema_update(1.0).unwrap();
        assert_eq!(m.target.content_hash(), before);
    }

    #[test]
    fn batch_encode_matches_per_sample_encode_bitwise() {
        let m = tiny_model(3);
        let x = random_batch(3, 4);
        let all = m.encode_eval(&x, false).unwrap();
        let d = m.cfg.latent_dim();
        let plane = 2 * 8 * 16;
        for i in 0..3 {
            let mut one = Tensor::zeros(&[1, 2, 8, 16]);
            one.data_mut().copy_from_slice(&x.data()[i * plane..(i + 1) * plane]);
            let zi = m.encode_eval(&one, false).unwrap();
            assert_eq!(
                zi.data(),
                &all.data()[i * d..(i + 1) * d],
                "sample {i}: batched and single encodes must agree exactly"
            );
        }
    }

    #[test]
    fn target_and_online_encoders_agree_until_the_first_divergence() {
        let mut m = tiny_model(5);
        let x = random_batch(2, 6);
        let zo = m.encode_eval(&x, false).unwrap();
        let zt = m.encode_eval(&x, true).unwrap();
        assert_eq!(zo.data(), zt.data(), "fresh model: both encoders are the same function");
        m.online.get_mut("enc.head.b").data_mut()[0] = 0.5;
        let zo2 = m.encode_eval(&x, false).unwrap();
        let zt2 = m.encode_eval(&x, true).unwrap();
        assert_ne!(zo2.data(), zo.data(), "online encode must see the parameter change");
        assert_eq!(zt2.data(), zt.data(), "target encode must not");
    }

    #[test]
    fn encode_rejects_mismatched_input_shapes() {
        let m = tiny_model(7);
        let bad = Tensor::zeros(&[2, 2, 8, 15]);
        assert!(matches!(
            m.encode_eval(&bad, false),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn rollout_latent_matches_repeated_single_steps() {
        let m = tiny_model(8);
        let d = m.cfg.latent_dim();
        let z0: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.5).collect();
        let actions = [[0.2, -0.1], [0.05, 0.3], [-0.4, 0.0]];
        let joint = m.rollout_latent(&z0, &actions).unwrap();
        assert_eq!(joint.shape(), &[3, d]);

        let mut z = z0.clone();
        for (i, a) in actions.iter().enumerate() {
            let step = m.rollout_latent(&z, std::slice::from_ref(a)).unwrap();
            z = step.data().to_vec();
            assert_eq!(
                &joint.data()[i * d..(i + 1) * d],
                z.as_slice(),
                "step {i} of the joint rollout must equal the folded single step"
            );
        }

        let empty = m.rollout_latent(&z0, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, d], "empty rollout is an empty plan, not an error");
    }

    #[test]
    fn generator_is_refused_for_non_homomorphic_families() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                depths: vec![1],
                channels: vec![3],
                latent_dim: 4,
                ..EncoderConfig::default()
            },
            predictor: PredictorConfig { kind: PredictorKind::Mlp, hidden: 8 },
            idm_hidden: 8,
            in_rows: 8,
            in_taps: 16,
        };
        let m = WorldModel::new(cfg, 9).unwrap();
        assert!(m.generator([0.1, 0.2]).is_err());
        assert!(m.rollout_latent(&[0.0; 4], &[[0.1, 0.2]]).is_ok());
    }

    #[test]
    fn idm_fingerprint_survives_ema_and_dynamics_changes() {
        let mut m = tiny_model(10);
        let before = m.idm_hash();
        m.online.get_mut("enc.head.b").data_mut()[0] = 2.0;
        m.ema_update(0.5).unwrap();
        for (_, t, _) in m.dynamics.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1;
            }
        }
        assert_eq!(m.idm_hash(), before, "nothing in training may touch the frozen probe");
    }
}
