//! Named parameter storage and its bridge into the autodiff graph.
//!
//! A [`ParamStore`] is an ordered map from stable string names to tensors.
//! Insertion order is the canonical order everywhere — optimizer state,
//! EMA updates, checkpoint layout, hashing — so identical construction code
//! yields identical byte streams.
//!
//! Every tensor carries a [`ParamKind`]:
//! * `Weight` — matrices and convolution kernels; the only tensors that
//!   receive decoupled weight decay;
//! * `Gain` — biases, normalization scales/shifts; trained, never decayed;
//! * `Buffer` — running statistics; never trained, updated out-of-band and
//!   folded into EMA copies.

use std::collections::HashMap;

use crate::error::ModelError;
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gain,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    kind: ParamKind,
}

/// Ordered, named tensor collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor under a unique name. Panics on duplicates — parameter
    /// names are compile-time-style constants, never user input.
    pub fn insert(&mut self, name: &str, tensor: Tensor, kind: ParamKind) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), tensor, kind });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn kind(&self, name: &str) -> ParamKind {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.entries[i].kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterate in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor, e.kind))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, ParamKind)> {
        self.entries.iter_mut().map(|e| (e.name.as_str(), &mut e.tensor, e.kind))
    }

    /// Total scalar count across non-buffer tensors.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Elementwise EMA pull toward `source`:
    /// `self = decay * self + (1 - decay) * source`, applied to every entry
    /// including buffers. Stores must agree on names, order, and shapes.
    pub fn ema_from(&mut self, source: &ParamStore, decay: f64) -> Result<(), ModelError> {
        if self.entries.len() != source.entries.len() {
            return Err(ModelError::ParamSetMismatch {
                reason: format!("{} vs {} entries", self.entries.len(), source.entries.len()),
            });
        }
        for (dst, src) in self.entries.iter_mut().zip(&source.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(ModelError::ParamSetMismatch {
                    reason: format!(
                        "{} {:?} vs {} {:?}",
                        dst.name,
                        dst.tensor.shape(),
                        src.name,
                        src.tensor.shape()
                    ),
                });
            }
            for (d, &s) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
                *d = decay * *d + (1.0 - decay) * s;
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes, and exact value bits — the "has anything
    /// changed" fingerprint used by the frozen-probe invariant.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Name-to-node map for one store bound into one graph.
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Bind every non-buffer tensor of a store as a graph leaf: trainable leaves
/// get gradients, constant leaves stop them (the EMA target branch). Buffers
/// are never bound — fixed-statistics normalization reads them directly
/// from the store.
pub fn bind_params(g: &mut Graph, store: &ParamStore, trainable: bool) -> Bound {
    let mut ids = HashMap::new();
    for (name, tensor, kind) in store.iter() {
        if kind == ParamKind::Buffer {
            continue;
        }
        let id = if trainable { g.param(tensor.clone()) } else { g.constant(tensor.clone()) };
        ids.insert(name.to_string(), id);
    }
    Bound { ids }
}

/// Pull gradients for every bound parameter of a store, in store order,
/// treating absent gradients as zeros (a parameter can sit outside the loss
/// path — e.g. the unused half of a predictor — and still be optimized).
pub fn collect_grads(
    g: &Graph,
    grads: &Gradients,
    store: &ParamStore,
    bound: &Bound,
) -> Vec<(String, Tensor)> {
    let _ = g;
    let mut out = Vec::new();
    for (name, tensor, kind) in store.iter() {
        if kind == ParamKind::Buffer {
            continue;
        }
        let grad = grads
            .wrt(bound.id(name))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        out.push((name.to_string(), grad));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_ab() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(&[2], vec![0.0, 2.0]), ParamKind::Weight);
        s.insert("b", Tensor::scalar(0.0), ParamKind::Gain);
        s
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        // decay = 1 leaves the copy untouched; decay = 0 replaces it.
        let source = {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::from_vec(&[2], vec![1.0, 4.0]), ParamKind::Weight);
            s.insert("b", Tensor::scalar(1.0), ParamKind::Gain);
            s
        };
        let mut frozen = store_ab();
        frozen.ema_from(&source, 1.0).unwrap();
        assert_eq!(frozen.get("a").data(), &[0.0, 2.0]);

        let mut replaced = store_ab();
        replaced.ema_from(&source, 0.0).unwrap();
        assert_eq!(replaced.get("a").data(), &[1.0, 4.0]);

        // Scalar case: 0.9995 * 0 + 0.0005 * 1 = 0.0005.
        let mut ema = store_ab();
        ema.ema_from(&source, 0.9995).unwrap();
        assert!((ema.get("b").item() - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_mismatched_stores() {
        let mut a = store_ab();
        let mut b = ParamStore::new();
        b.insert("a", Tensor::from_vec(&[3], vec![0.0; 3]), ParamKind::Weight);
        b.insert("b", Tensor::scalar(0.0), ParamKind::Gain);
        assert!(matches!(a.ema_from(&b, 0.5), Err(ModelError::ParamSetMismatch { .. })));
    }

    #[test]
    fn ema_result_is_componentwise_convex() {
        let mut ema = store_ab();
        let mut source = ParamStore::new();
        source.insert("a", Tensor::from_vec(&[2], vec![-1.0, 10.0]), ParamKind::Weight);
        source.insert("b", Tensor::scalar(3.0), ParamKind::Gain);
        let before: Vec<f64> = ema.iter().flat_map(|(_, t, _)| t.data().to_vec()).collect();
        ema.ema_from(&source, 0.25).unwrap();
        let after: Vec<f64> = ema.iter().flat_map(|(_, t, _)| t.data().to_vec()).collect();
        let src: Vec<f64> = source.iter().flat_map(|(_, t, _)| t.data().to_vec()).collect();
        for i in 0..after.len() {
            let lo = before[i].min(src[i]);
            let hi = before[i].max(src[i]);
            assert!(after[i] >= lo && after[i] <= hi, "component {i} left the interval");
        }
    }

    #[test]
    fn content_hash_tracks_any_bit_flip() {
        let a = store_ab();
        let mut b = store_ab();
        assert_eq!(a.content_hash(), b.content_hash());
        let v = &mut b.get_mut("a").data_mut()[1];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(a.content_hash(), b.content_hash(), "hash must see a single flipped bit");
    }

    #[test]
    fn binding_skips_buffers_and_respects_trainability() {
        let mut s = store_ab();
        s.insert("stats", Tensor::zeros(&[4]), ParamKind::Buffer);
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &s, true);
        assert_eq!(g.len(), 2, "buffers must not become nodes");
        let root = {
            let a = bound.id("a");
            let sq = g.square(a);
            g.sum(sq)
        };
        let grads = g.backward(root).unwrap();
        let collected = collect_grads(&g, &grads, &s, &bound);
        assert_eq!(collected.len(), 2);
        assert_eq!(collected[0].0, "a");
        assert_eq!(collected[0].1.data(), &[0.0, 4.0]);
        // "b" is off the loss path: zero gradient, not a missing entry.
        assert_eq!(collected[1].1.data(), &[0.0]);
    }
}
