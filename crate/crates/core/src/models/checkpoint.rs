//! Checkpoint container.
//!
//! Layout: the 8-byte magic `ISLCKPT1`, a little-endian `u64` header length,
//! a JSON header, then a blob of little-endian `f64` values. The blob holds
//! every parameter in header order, followed by each optimizer's `m` and `v`
//! moment vectors in header order. Values are widened to `f64`, so `f32` and
//! `f64` parameters both round-trip exactly.

use std::io::{Read, Write};
use std::path::Path;

use islab_tensor::{Adam, AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{NetworkConfig, Strategy};
use crate::domain::{Modality, CHANNEL_ORDER};
use crate::{IslError, Result, Scalar};

const MAGIC: &[u8; 8] = b"ISLCKPT1";

/// Structured header fields a reader can inspect without touching the blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model_id: String,
    pub network: NetworkConfig,
    pub strategy: Strategy,
    pub modality_scope: Option<Modality>,
    pub channel_order: Vec<String>,
    pub epoch: usize,
    pub step: usize,
    /// Owner-defined state (training config, sampler and rng positions).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(model_id: &str, network: NetworkConfig, strategy: Strategy, modality_scope: Option<Modality>) -> Self {
        Self {
            model_id: model_id.to_string(),
            network,
            strategy,
            modality_scope,
            channel_order: CHANNEL_ORDER.iter().map(|o| o.to_string()).collect(),
            epoch: 0,
            step: 0,
            extra: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<T> {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keyed by parameter name.
    pub states: Vec<(String, AdamState<T>)>,
}

impl<T: Scalar> OptimizerSnapshot<T> {
    pub fn capture(name: &str, opt: &Adam<T>, store: &ParamStore<T>) -> Self {
        Self {
            name: name.to_string(),
            lr: opt.lr.to_f64_lossless(),
            beta1: opt.beta1.to_f64_lossless(),
            beta2: opt.beta2.to_f64_lossless(),
            eps: opt.eps.to_f64_lossless(),
            states: opt.state().iter().map(|(&id, s)| (store.name(id).to_string(), s.clone())).collect(),
        }
    }

    pub fn restore(&self, store: &ParamStore<T>) -> Result<Adam<T>> {
        let mut opt = Adam::new(T::from_f64_lossy(self.lr), T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        opt.eps = T::from_f64_lossy(self.eps);
        for (name, st) in &self.states {
            let id = store
                .id(name)
                .ok_or_else(|| IslError::Checkpoint(format!("optimizer {} references unknown parameter {name}", self.name)))?;
            opt.set_state(id, st.clone());
        }
        Ok(opt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizers: Vec<OptimizerSnapshot<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    optimizers: Vec<OptimizerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    name: String,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    states: Vec<StateEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateEntry {
    param: String,
    step: u64,
    len: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(meta: CheckpointMeta, store: &ParamStore<T>, optimizers: Vec<OptimizerSnapshot<T>>) -> Self {
        let params = store.ids().map(|id| (store.name(id).to_string(), (**store.get(id)).clone())).collect();
        Self { meta, params, optimizers }
    }

    /// Copies parameters into a store built from the same config.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(IslError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| IslError::Checkpoint(format!("unknown parameter {name}")))?;
            store
                .set(id, value.clone())
                .map_err(|e| IslError::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerSnapshot<T>> {
        self.optimizers.iter().find(|o| o.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            optimizers: self
                .optimizers
                .iter()
                .map(|o| OptimizerEntry {
                    name: o.name.clone(),
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    states: o
                        .states
                        .iter()
                        .map(|(p, s)| StateEntry { param: p.clone(), step: s.step, len: s.m.len() })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| IslError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[T]| {
            for v in vals {
                out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
            }
        };
        for (_, t) in &self.params {
            put(t.data());
        }
        for o in &self.optimizers {
            for (_, s) in &o.states {
                put(&s.m);
                put(&s.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| IslError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| IslError::Checkpoint(format!("header: {e}")))?;
        let mut blob = body[hlen..].chunks_exact(8);
        if blob.remainder().len() != 0 {
            return Err(bad("blob length is not a multiple of 8"));
        }
        let mut take = |n: usize| -> Result<Vec<T>> {
            (0..n)
                .map(|_| {
                    blob.next()
                        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                        .ok_or_else(|| bad("truncated parameter blob"))
                })
                .collect()
        };
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            params.push((p.name.clone(), Tensor::from_vec(&p.shape, take(n)?)?));
        }
        let mut optimizers = Vec::with_capacity(header.optimizers.len());
        for o in &header.optimizers {
            let mut states = Vec::with_capacity(o.states.len());
            for s in &o.states {
                let m = take(s.len)?;
                let v = take(s.len)?;
                states.push((s.param.clone(), AdamState { step: s.step, m, v }));
            }
            optimizers.push(OptimizerSnapshot {
                name: o.name.clone(),
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                states,
            });
        }
        if blob.next().is_some() {
            return Err(bad("trailing data after parameter blob"));
        }
        Ok(Self { meta: header.meta, params, optimizers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| IslError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| IslError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| IslError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            IslError::Checkpoint(msg) => IslError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Backbone, Network, NetworkConfig, Tier};

    #[test]
    fn round_trip_preserves_every_bit() {
        let net: Network<f64> = Network::build(NetworkConfig::for_tier(Tier::Test, Backbone::UnetPP, true, 3)).unwrap();
        let mut opt = Adam::new(2e-4, 0.5, 0.999);
        let ids = net.generator_params();
        opt.set_state(ids[0], AdamState { step: 7, m: vec![0.1; net.store.get(ids[0]).numel()], v: vec![1e-9; net.store.get(ids[0]).numel()] });
        let meta = CheckpointMeta::new("unetpp-unified", net.config, Strategy::Unified, None);
        let ck = Checkpoint::capture(meta, &net.store, vec![OptimizerSnapshot::capture("gen", &opt, &net.store)]);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut fresh: Network<f64> =
            Network::build(NetworkConfig { init_seed: 99, ..net.config }).unwrap();
        back.restore_params(&mut fresh.store).unwrap();
        for id in net.store.ids() {
            assert_eq!(net.store.get(id).data(), fresh.store.get(id).data());
        }
        let restored = back.optimizer("gen").unwrap().restore(&fresh.store).unwrap();
        assert_eq!(restored.state(), opt.state());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::<f64>::from_bytes(b"nonsense").is_err());
        let net: Network<f32> = Network::build(NetworkConfig::for_tier(Tier::Test, Backbone::UnetPP, false, 3)).unwrap();
        let ck = Checkpoint::capture(CheckpointMeta::new("m", net.config, Strategy::Unified, None), &net.store, vec![]);
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(IslError::Checkpoint(_))));
    }
}
