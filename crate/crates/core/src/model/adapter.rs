use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use qrw_tensor::{ParamId, ParamStore, Tensor};

use super::{Fingerprint, ModelConfig, ModelError, Result};

/// Standard deviation of the down-projection initializer.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Sublayer an adapter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    SelfAttn,
    CrossAttn,
    Ffn,
}

/// Location of one adapter inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterKey {
    pub decoder: bool,
    pub layer: usize,
    pub slot: Slot,
}

impl AdapterKey {
    /// Position in the flat adapter ordering: encoder layers first (two
    /// adapters each), then decoder layers (three each).
    pub fn index(&self, n_enc_layers: usize) -> usize {
        if self.decoder {
            let s = match self.slot {
                Slot::SelfAttn => 0,
                Slot::CrossAttn => 1,
                Slot::Ffn => 2,
            };
            2 * n_enc_layers + 3 * self.layer + s
        } else {
            2 * self.layer + usize::from(self.slot == Slot::Ffn)
        }
    }
}

/// Read-only view of one adapter: `x + W_up tanh(W_down x + b_down) + b_up`.
#[derive(Debug, Clone, Copy)]
pub struct Adapter<'a> {
    pub w_down: &'a Tensor,
    pub b_down: &'a Tensor,
    pub w_up: &'a Tensor,
    pub b_up: &'a Tensor,
}

impl Adapter<'_> {
    /// Applies the adapter to a single `d`-vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let b = self.b_down.numel();
        let d = x.len();
        let wd = self.w_down.data();
        let wu = self.w_up.data();
        let hidden: Vec<f64> = (0..b)
            .map(|j| {
                let z: f64 = (0..d).map(|i| x[i] * wd[i * b + j]).sum::<f64>() + self.b_down.data()[j];
                z.tanh()
            })
            .collect();
        (0..d)
            .map(|i| {
                let u: f64 = (0..b).map(|j| hidden[j] * wu[j * d + i]).sum::<f64>();
                x[i] + u + self.b_up.data()[i]
            })
            .collect()
    }
}

/// One full set of adapters (2 per encoder layer, 3 per decoder layer).
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub label: String,
    d_model: usize,
    bottleneck: usize,
    n_enc_layers: usize,
    n_dec_layers: usize,
    store: ParamStore,
    /// Fingerprint of the frozen base these adapters were trained against.
    pub base_fingerprint: Option<Fingerprint>,
}

impl AdapterSet {
    /// Fresh adapters: `W_down ~ N(0, 0.02)`, everything else zero, so the
    /// set starts as the identity.
    pub fn new(cfg: &ModelConfig, label: impl Into<String>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("valid std");
        let (d, b) = (cfg.d_model, cfg.adapter_bottleneck);
        let mut store = ParamStore::new();
        for i in 0..cfg.n_enc_layers * 2 + cfg.n_dec_layers * 3 {
            let wd = Tensor::from_fn(&[d, b], |_| normal.sample(&mut rng));
            store.push(format!("adapter.{i}.w_down"), wd.with_requires_grad(true));
            store.push(format!("adapter.{i}.b_down"), Tensor::zeros(&[b]).with_requires_grad(true));
            store.push(format!("adapter.{i}.w_up"), Tensor::zeros(&[b, d]).with_requires_grad(true));
            store.push(format!("adapter.{i}.b_up"), Tensor::zeros(&[d]).with_requires_grad(true));
        }
        Ok(Self {
            label: label.into(),
            d_model: d,
            bottleneck: b,
            n_enc_layers: cfg.n_enc_layers,
            n_dec_layers: cfg.n_dec_layers,
            store,
            base_fingerprint: None,
        })
    }

    /// Rebuilds a set from stored tensors, checking names and shapes.
    pub fn from_store(cfg: &ModelConfig, label: impl Into<String>, store: ParamStore) -> Result<Self> {
        let mut set = Self::new(cfg, label, 0)?;
        if store.len() != set.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} adapter tensors, found {}",
                set.store.len(),
                store.len()
            )));
        }
        for i in 0..store.len() {
            let (id, want) = (ParamId(i), &set.store);
            if store.name(id) != want.name(id) || store.get(id).shape() != want.get(id).shape() {
                return Err(ModelError::Checkpoint(format!(
                    "adapter tensor {} does not match layout entry {}",
                    store.name(id),
                    want.name(id)
                )));
            }
        }
        set.store = store;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.store.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn adapter(&self, i: usize) -> Adapter<'_> {
        let t = |k: usize| self.store.get(ParamId(4 * i + k));
        Adapter {
            w_down: t(0),
            b_down: t(1),
            w_up: t(2),
            b_up: t(3),
        }
    }

    pub fn get(&self, key: AdapterKey) -> Adapter<'_> {
        self.adapter(key.index(self.n_enc_layers))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        super::fingerprint_store(&self.store)
    }

    /// True when the set's geometry matches `cfg`.
    pub fn fits(&self, cfg: &ModelConfig) -> bool {
        self.d_model == cfg.d_model
            && self.bottleneck == cfg.adapter_bottleneck
            && self.n_enc_layers == cfg.n_enc_layers
            && self.n_dec_layers == cfg.n_dec_layers
    }
}

/// Parameter count of the BART-base model that adapter ratios are quoted against.
pub const BART_BASE_PARAMS: usize = 139_420_416;

/// Trainable parameters in one adapter set: `(2 N_enc + 3 N_dec)(2db + b + d)`.
pub fn count_adapter_params(cfg: &ModelConfig) -> usize {
    let (d, b) = (cfg.d_model, cfg.adapter_bottleneck);
    (2 * cfg.n_enc_layers + 3 * cfg.n_dec_layers) * (2 * d * b + b + d)
}

/// Adapter parameters relative to a base model of `base_params`.
pub fn param_ratio(cfg: &ModelConfig, base_params: usize) -> f64 {
    count_adapter_params(cfg) as f64 / base_params as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_indices_cover_every_adapter_once() {
        let cfg = ModelConfig::tiny();
        let mut seen = Vec::new();
        for layer in 0..cfg.n_enc_layers {
            for slot in [Slot::SelfAttn, Slot::Ffn] {
                seen.push(AdapterKey { decoder: false, layer, slot }.index(cfg.n_enc_layers));
            }
        }
        for layer in 0..cfg.n_dec_layers {
            for slot in [Slot::SelfAttn, Slot::CrossAttn, Slot::Ffn] {
                seen.push(AdapterKey { decoder: true, layer, slot }.index(cfg.n_enc_layers));
            }
        }
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(AdapterSet::new(&cfg, "x", 0).unwrap().len(), 10);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let set = AdapterSet::new(&ModelConfig::tiny(), "x", 3).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(set.adapter(4).apply(&x), x);
        assert!(set.adapter(0).w_down.data().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn counts_match_closed_form() {
        let cfg = ModelConfig::tiny();
        let set = AdapterSet::new(&cfg, "x", 0).unwrap();
        assert_eq!(set.num_params(), count_adapter_params(&cfg));
    }
}
