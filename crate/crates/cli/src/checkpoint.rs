//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `GINPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! payload of little-endian `f32` tensors in header order. The header
//! records the SHA-256 of the payload, so truncated or altered files are
//! refused.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use guided_inpaint_core::nn::ParamStore;
use guided_inpaint_core::optim::Adam;
use guided_inpaint_core::percept::{LambdaNormalizer, PERCEPT_PREFIX};
use guided_inpaint_core::synthnet::GUIDANCE_PREFIX;
use guided_inpaint_core::train::{LocTrainer, SynthTrainer, TrainConfig};
use guided_inpaint_core::{Error, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::train_hash;
use crate::error::{data, io_at, CliError, CliResult};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"GINPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Loc,
    Synth,
    /// Bare named tensors, e.g. pretrained VGG-16 weights keyed `conv1_1.weight`.
    Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    pub config_hash: String,
    pub iteration: u64,
    pub config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
    /// Step counters of the optimizers, keyed by parameter group.
    pub adam_steps: BTreeMap<String, u64>,
    pub lambdas: Option<LambdaNormalizer>,
    /// Fingerprint of the frozen parameters (guidance branch and
    /// perception network) of a synthesis run.
    pub frozen_fingerprint: Option<String>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: Kind, config: Option<TrainConfig>, iteration: u64) -> Self {
        let config_hash = config.as_ref().map(train_hash).unwrap_or_default();
        Self {
            header: Header {
                kind,
                config_hash,
                iteration,
                config,
                tensors: Vec::new(),
                adam_steps: BTreeMap::new(),
                lambdas: None,
                frozen_fingerprint: None,
                payload_sha256: String::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> CliResult<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| data(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut header = self.header.clone();
        header.tensors.clear();
        for (name, t) in &self.tensors {
            header.tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.payload_sha256 = hex(&Sha256::digest(&payload));
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let hend = 20usize.checked_add(hlen as usize).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| format!("bad header: {e}"))?;
        let payload = &bytes[hend..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err("payload checksum mismatch".into());
        }
        let mut tensors = BTreeMap::new();
        let mut at = 0usize;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = at + 4 * n;
            if end > payload.len() {
                return Err(format!("payload too short for {}", e.name));
            }
            let vals = payload[at..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, vals).map_err(|e| e.to_string())?);
            at = end;
        }
        if at != payload.len() {
            return Err("trailing payload bytes".into());
        }
        Ok(Self { header, tensors })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(io_at(path))?;
        Self::from_bytes(&bytes).map_err(|e| data(format!("corrupt checkpoint {}: {e}", path.display())))
    }

    fn expect_kind(&self, kind: Kind) -> CliResult<&TrainConfig> {
        if self.header.kind != kind {
            return Err(data(format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind)));
        }
        self.header.config.as_ref().ok_or_else(|| data("checkpoint lacks its training config"))
    }
}

fn put_store(ck: &mut Checkpoint, store: &ParamStore<f32>) {
    for p in store.iter() {
        ck.insert(p.name.clone(), p.value.clone());
    }
}

fn put_adam(ck: &mut Checkpoint, group: &str, store: &ParamStore<f32>, adam: &Adam<f32>) {
    ck.header.adam_steps.insert(group.to_string(), adam.step);
    for (i, p) in store.iter().enumerate() {
        ck.insert(format!("adam.{group}.m.{}", p.name), adam.first_moment[i].clone());
        ck.insert(format!("adam.{group}.v.{}", p.name), adam.second_moment[i].clone());
    }
}

fn take_store(ck: &Checkpoint, store: &mut ParamStore<f32>) -> CliResult<()> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        store.load(&name, ck.get(&name)?.clone())?;
    }
    Ok(())
}

fn take_adam(ck: &Checkpoint, group: &str, store: &ParamStore<f32>, adam: &mut Adam<f32>) -> CliResult<()> {
    adam.step = *ck.header.adam_steps.get(group).ok_or_else(|| data(format!("checkpoint lacks {group} optimizer state")))?;
    for (i, p) in store.iter().enumerate() {
        for (kind, slot) in [("m", &mut adam.first_moment[i]), ("v", &mut adam.second_moment[i])] {
            let t = ck.get(&format!("adam.{group}.{kind}.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(CliError::Core(Error::Incompatible(format!("optimizer state shape for {}", p.name))));
            }
            *slot = t.clone();
        }
    }
    Ok(())
}

pub fn frozen_fingerprint(t: &SynthTrainer<f32>) -> String {
    format!(
        "{:016x}{:016x}",
        t.generator.store().fingerprint(GUIDANCE_PREFIX),
        t.percept.store().fingerprint(PERCEPT_PREFIX)
    )
}

pub fn loc_checkpoint(t: &LocTrainer<f32>) -> Checkpoint {
    let mut ck = Checkpoint::new(Kind::Loc, Some(t.config.clone()), t.iteration);
    put_store(&mut ck, t.net.store());
    put_adam(&mut ck, "loc", t.net.store(), &t.adam);
    ck
}

pub fn restore_loc(ck: &Checkpoint) -> CliResult<LocTrainer<f32>> {
    let config = ck.expect_kind(Kind::Loc)?.clone();
    let mut t = LocTrainer::<f32>::new(config)?;
    take_store(ck, t.net.store_mut())?;
    take_adam(ck, "loc", t.net.store(), &mut t.adam)?;
    t.iteration = ck.header.iteration;
    Ok(t)
}

pub fn synth_checkpoint(t: &SynthTrainer<f32>) -> Checkpoint {
    let mut ck = Checkpoint::new(Kind::Synth, Some(t.config.clone()), t.iteration);
    put_store(&mut ck, t.generator.store());
    put_store(&mut ck, t.critic.store());
    put_store(&mut ck, t.percept.store());
    put_adam(&mut ck, "generator", t.generator.store(), &t.gen_adam);
    put_adam(&mut ck, "critic", t.critic.store(), &t.critic_adam);
    ck.header.lambdas = Some(t.lambdas.clone());
    ck.header.frozen_fingerprint = Some(frozen_fingerprint(t));
    ck
}

pub fn restore_synth(ck: &Checkpoint) -> CliResult<SynthTrainer<f32>> {
    let config = ck.expect_kind(Kind::Synth)?.clone();
    let mut t = SynthTrainer::<f32>::new(config)?;
    take_store(ck, t.generator.store_mut())?;
    take_store(ck, t.critic.store_mut())?;
    take_store(ck, t.percept.store_mut())?;
    take_adam(ck, "generator", t.generator.store(), &mut t.gen_adam)?;
    take_adam(ck, "critic", t.critic.store(), &mut t.critic_adam)?;
    t.lambdas = ck.header.lambdas.clone().ok_or_else(|| data("synthesis checkpoint lacks perceptual weights"))?;
    t.iteration = ck.header.iteration;
    Ok(t)
}

/// Copies every tensor `layer.param` of a weights container into
/// `prefix.layer.param` of `store`. Returns how many were loaded; any shape
/// mismatch is an error.
pub fn load_pretrained(weights: &Checkpoint, store: &mut ParamStore<f32>, prefix: &str) -> CliResult<usize> {
    if weights.header.kind != Kind::Weights {
        return Err(data(format!("expected a weights container, found {:?}", weights.header.kind)));
    }
    let mut loaded = 0;
    for (name, t) in &weights.tensors {
        let full = format!("{prefix}.{name}");
        if store.find(&full).is_some() {
            store.load(&full, t.clone())?;
            loaded += 1;
        }
    }
    Ok(loaded)
}

/// Loads pretrained VGG-16 weights into the guidance branch and the
/// perception network of a fresh synthesis trainer.
pub fn apply_pretrained(weights: &Checkpoint, t: &mut SynthTrainer<f32>) -> CliResult<()> {
    let g = load_pretrained(weights, t.generator.store_mut(), GUIDANCE_PREFIX)?;
    let p = load_pretrained(weights, t.percept.store_mut(), PERCEPT_PREFIX)?;
    if g == 0 || p == 0 {
        return Err(CliError::Core(Error::Incompatible(format!(
            "weights container matched {g} guidance and {p} perception tensors"
        ))));
    }
    log::info!("loaded {g} guidance-branch and {p} perception tensors");
    Ok(())
}
