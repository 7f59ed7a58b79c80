//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      8 bytes  "FACTCK01"
//! version    u32
//! header     u32 length + UTF-8 JSON (CheckpointHeader)
//! networks   u32 count, each:
//!              name (u32 length + UTF-8), trainable u8,
//!              u32 tensor count, each: name, u32 rank, u32 dims[rank], f32 data[product(dims)]
//! optimizers u32 count, each:
//!              name, u64 step, f64 beta1, f64 beta2, f64 eps,
//!              u32 state count, each: network name, u32 tensor count,
//!                each: u32 length, f32 m[length], f32 v[length]
//! checksum   32 bytes, SHA-256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factorgen::ByteReader;
use crate::model::{architecture, encoder_layers, Mode, ModelBundle, ModelConfig, Problem, PretrainOutcome, E_ID};
use crate::nn::{Adam, AdamConfig, Moments, Network};
use crate::trainer::{Optimizers, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FACTCK01";
pub const VERSION: u32 = 1;

const OPT_CLASSIFIERS: &str = "classifiers";
const OPT_DISCRIMINATOR: &str = "discriminator";
const OPT_GENERATOR: &str = "generator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// A pretrained, frozen identity encoder on its own.
    Identity,
    /// A model bundle, with optimizer state when saved during training.
    Model,
}

/// Architecture and bookkeeping stored ahead of the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode: Option<Mode>,
    pub model: ModelConfig,
    pub problem: Problem,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub e_id_digest: Option<String>,
    /// Identity accuracy measured at the end of pretraining.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub identity_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub networks: Vec<Network<f32>>,
    pub optimizers: Vec<(String, Adam<f32>)>,
}

impl Checkpoint {
    pub fn identity(outcome: &PretrainOutcome, model: &ModelConfig, problem: Problem) -> Self {
        Self {
            header: CheckpointHeader {
                kind: CheckpointKind::Identity,
                mode: None,
                model: model.clone(),
                problem,
                train: None,
                epoch: 0,
                step: 0,
                e_id_digest: Some(outcome.digest.clone()),
                identity_accuracy: Some(outcome.accuracy),
            },
            networks: vec![outcome.encoder.clone()],
            optimizers: Vec::new(),
        }
    }

    pub fn from_bundle(bundle: &ModelBundle<f32>) -> Self {
        Self {
            header: CheckpointHeader {
                kind: CheckpointKind::Model,
                mode: Some(bundle.mode),
                model: bundle.config.clone(),
                problem: bundle.problem,
                train: None,
                epoch: 0,
                step: 0,
                e_id_digest: bundle.e_id.as_ref().map(|n| n.digest()),
                identity_accuracy: None,
            },
            networks: bundle.networks().into_iter().cloned().collect(),
            optimizers: Vec::new(),
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        let mut ck = Self::from_bundle(&trainer.bundle);
        ck.header.train = Some(trainer.config.clone());
        ck.header.epoch = trainer.epoch;
        ck.header.step = trainer.step;
        let o = &trainer.optimizers;
        ck.optimizers = vec![
            (OPT_CLASSIFIERS.into(), o.classifiers.clone()),
            (OPT_DISCRIMINATOR.into(), o.discriminator.clone()),
            (OPT_GENERATOR.into(), o.generator.clone()),
        ];
        ck
    }

    fn network(&self, name: &str) -> Option<&Network<f32>> {
        self.networks.iter().find(|n| n.name == name)
    }

    /// The frozen identity encoder, from either checkpoint kind.
    pub fn identity_encoder(&self) -> Result<Network<f32>> {
        let stored = self.network(E_ID).ok_or(Error::MissingNetwork(E_ID))?;
        let mut net = Network::new(E_ID, encoder_layers(&self.header.model, self.header.problem.shape.channels));
        copy_params(&mut net, stored)?;
        net.freeze();
        if let Some(expected) = &self.header.e_id_digest {
            if &net.digest() != expected {
                return Err(Error::Format("identity encoder does not match its recorded digest".into()));
            }
        }
        Ok(net)
    }

    pub fn bundle(&self) -> Result<ModelBundle<f32>> {
        if self.header.kind != CheckpointKind::Model {
            return Err(Error::Format("checkpoint holds an identity encoder, not a model".into()));
        }
        let mode = self.header.mode.ok_or_else(|| Error::Format("model checkpoint without mode".into()))?;
        let identity = match self.network(E_ID) {
            Some(_) => Some(self.identity_encoder()?),
            None => None,
        };
        let mut bundle = ModelBundle::new(self.header.model.clone(), self.header.problem, mode, identity, 0)?;
        let names: Vec<String> = bundle.networks().iter().map(|n| n.name.clone()).collect();
        if names.len() != self.networks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} networks, mode {mode} needs {}",
                self.networks.len(),
                names.len()
            )));
        }
        for name in names {
            let stored = self.network(&name).ok_or_else(|| Error::Format(format!("missing network {name}")))?;
            let target = bundle.network_mut(&name).expect("listed above");
            copy_params(target, stored)?;
            target.set_trainable(stored.is_trainable());
        }
        Ok(bundle)
    }

    /// Training state for resuming; `config` overrides the stored one when given.
    pub fn trainer(&self, config: Option<TrainConfig>) -> Result<Trainer> {
        let config = config
            .or_else(|| self.header.train.clone())
            .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?;
        let find = |name: &str| {
            self.optimizers
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, o)| o.clone())
                .ok_or_else(|| Error::Format(format!("missing optimizer state {name}")))
        };
        let optimizers = Optimizers {
            classifiers: find(OPT_CLASSIFIERS)?,
            discriminator: find(OPT_DISCRIMINATOR)?,
            generator: find(OPT_GENERATOR)?,
        };
        Trainer::resume(config, self.bundle()?, optimizers, self.header.epoch, self.header.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.header).expect("header serializes"));
        put_u32(&mut out, self.networks.len());
        for net in &self.networks {
            put_str(&mut out, &net.name);
            out.push(u8::from(net.is_trainable()));
            put_u32(&mut out, net.layers.iter().map(|l| l.params.len()).sum());
            for (name, shape, data) in net.named_params() {
                put_str(&mut out, &name);
                put_u32(&mut out, shape.len());
                shape.iter().for_each(|&d| put_u32(&mut out, d));
                data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        put_u32(&mut out, self.optimizers.len());
        for (name, opt) in &self.optimizers {
            put_str(&mut out, name);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for v in [opt.config.beta1, opt.config.beta2, opt.config.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, opt.state.len());
            for (net, moments) in &opt.state {
                put_str(&mut out, net);
                put_u32(&mut out, moments.m.len());
                for (m, v) in moments.m.iter().zip(&moments.v) {
                    put_u32(&mut out, m.len());
                    m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Format("checkpoint too short".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let mut r = ByteReader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut networks = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let mut params = BTreeMap::new();
            for _ in 0..r.u32()? {
                let pname = r.string()?;
                let shape = (0..r.u32()?).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
                let data = (0..shape.iter().product::<usize>()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                params.insert(pname, (shape, data));
            }
            networks.push(network_from_params(&header, &name, trainable, params)?);
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let step = r.u64()?;
            let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let mut state = BTreeMap::new();
            for _ in 0..r.u32()? {
                let net = r.string()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..r.u32()? {
                    let n = r.u32()? as usize;
                    m.push((0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
                    v.push((0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?);
                }
                state.insert(net, Moments { m, v });
            }
            optimizers.push((name, Adam { config, step, state }));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { header, networks, optimizers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Rebuild a stored network from the architecture in the header.
fn network_from_params(
    header: &CheckpointHeader,
    name: &str,
    trainable: bool,
    mut params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<Network<f32>> {
    let layers = architecture(name, &header.model, &header.problem)
        .ok_or_else(|| Error::Format(format!("unexpected network {name}")))?;
    let mut net = Network::new(name, layers);
    for layer_idx in 0..net.layers.len() {
        for p in 0..net.layers[layer_idx].params.len() {
            let key = format!("{name}.{layer_idx}.{}", net.layers[layer_idx].params[p].name);
            let (shape, data) = params.remove(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            let param = &mut net.layers[layer_idx].params[p];
            if shape != param.shape {
                return Err(Error::Format(format!("tensor {key} has shape {shape:?}, expected {:?}", param.shape)));
            }
            param.data = data;
        }
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    net.set_trainable(trainable);
    Ok(net)
}

fn copy_params(target: &mut Network<f32>, source: &Network<f32>) -> Result<()> {
    if target.layers.len() != source.layers.len() {
        return Err(Error::Format(format!("network {} has a different layer count", source.name)));
    }
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        if t.kind != s.kind {
            return Err(Error::Format(format!("network {} has a different architecture", source.name)));
        }
        for (tp, sp) in t.params.iter_mut().zip(&s.params) {
            tp.data.clone_from(&sp.data);
        }
    }
    Ok(())
}
