//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SFLW" | u32 version | u64 header_len | header (JSON, header_len bytes)
//! | payload_f64 × f64 | buffer records
//! ```
//!
//! The header names every tensor with its shape and offset into the f64
//! payload. A buffer record is `u64 insertion_step | u32 n | n × u32 action`;
//! positives come first (in insertion order), then negatives (oldest first).
//! Trajectories are rebuilt by replaying their actions through the
//! environment described by the stored config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamState, MlpParams, ParamId, Tensor};
use crate::envs::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyNet, PriorPolicy};
use crate::replay::{BufferEntry, NegativeBuffer, PositiveBuffer};
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"SFLW";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    posterior: NetMeta,
    prior: PriorMeta,
    tensors: Vec<TensorMeta>,
    adam_t: u64,
    /// Parameter ids with Adam moments, stored as tensors `adam.m.<id>` and
    /// `adam.v.<id>`.
    adam_ids: Vec<usize>,
    payload_f64: u64,
    positives: u64,
    negatives: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PriorMeta {
    AnalyticUniform,
    Network(NetMeta),
}

#[derive(Debug, Serialize, Deserialize)]
struct NetMeta {
    kind: EnvKind,
    sizes: Vec<usize>,
    activation: Activation,
    window: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl NetMeta {
    fn of(net: &PolicyNet) -> NetMeta {
        NetMeta {
            kind: net.kind,
            sizes: net.mlp.sizes().to_vec(),
            activation: net.mlp.activation(),
            window: net.window,
        }
    }
}

#[derive(Default)]
struct Payload {
    values: Vec<f64>,
    tensors: Vec<TensorMeta>,
}

impl Payload {
    fn put(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.tensors.push(TensorMeta {
            name,
            shape,
            offset: self.values.len() as u64,
        });
        self.values.extend_from_slice(values);
    }

    fn put_net(&mut self, prefix: &str, net: &PolicyNet) {
        for (i, t) in net.mlp.tensors().iter().enumerate() {
            self.put(format!("{prefix}.{i}"), t.shape().to_vec(), t.values());
        }
    }
}

/// Serializes the complete training state.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut payload = Payload::default();
    payload.put_net("posterior", &t.policy.net);
    payload.put("log_z".into(), vec![1, 1], &[t.policy.log_z()]);
    let prior = match &t.prior {
        PriorPolicy::Uniform => PriorMeta::AnalyticUniform,
        PriorPolicy::Network(net) => {
            payload.put_net("prior", net);
            PriorMeta::Network(NetMeta::of(net))
        }
    };
    let mut adam_ids = Vec::new();
    for (id, m, v) in t.adam.moments() {
        adam_ids.push(id.0);
        payload.put(format!("adam.m.{}", id.0), vec![m.len()], m);
        payload.put(format!("adam.v.{}", id.0), vec![v.len()], v);
    }
    let header = Header {
        config: t.cfg.clone(),
        step: t.step,
        posterior: NetMeta::of(&t.policy.net),
        prior,
        tensors: payload.tensors,
        adam_t: t.adam.step_count(),
        adam_ids,
        payload_f64: payload.values.len() as u64,
        positives: t.positives.len() as u64,
        negatives: t.negatives.len() as u64,
    };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header.len() + 8 * payload.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &payload.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in t.positives.iter_by_arrival().chain(t.negatives.iter()) {
        write_entry(&mut out, e)?;
    }
    Ok(out)
}

fn write_entry(out: &mut Vec<u8>, e: &BufferEntry) -> Result<()> {
    out.extend_from_slice(&e.insertion_step.to_le_bytes());
    let n = u32::try_from(e.trajectory.actions.len()).map_err(|_| Error::Checkpoint("trajectory too long".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for &a in &e.trajectory.actions {
        let a = u32::try_from(a).map_err(|_| Error::Checkpoint("action index too large".into()))?;
        out.extend_from_slice(&a.to_le_bytes());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, expected \"SFLW\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let header_len = r.u64("header length")?;
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let n_f64 = usize::try_from(header.payload_f64).map_err(|_| Error::Checkpoint("payload length overflows".into()))?;
    let raw = r.take(
        n_f64
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("payload length overflows".into()))?,
        "payload",
    )?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut by_name: BTreeMap<&str, &TensorMeta> = BTreeMap::new();
    for t in &header.tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
    }
    let tensor = |name: &str| -> Result<Tensor> {
        let meta = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let len: usize = meta.shape.iter().product();
        let start = usize::try_from(meta.offset).map_err(|_| Error::Checkpoint("offset overflows".into()))?;
        let slice = start
            .checked_add(len)
            .and_then(|end| values.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
        Tensor::new(meta.shape.clone(), slice.to_vec())
    };
    let net = |prefix: &str, meta: &NetMeta| -> Result<PolicyNet> {
        let n = 2 * meta.sizes.len().saturating_sub(1);
        let tensors = (0..n).map(|i| tensor(&format!("{prefix}.{i}"))).collect::<Result<Vec<_>>>()?;
        Ok(PolicyNet {
            mlp: MlpParams::from_tensors(meta.sizes.clone(), meta.activation, tensors)?,
            kind: meta.kind,
            window: meta.window,
        })
    };

    let cfg = header.config;
    cfg.validate()?;
    let env = cfg.build_env()?;
    let prior = match &header.prior {
        PriorMeta::AnalyticUniform => PriorPolicy::Uniform,
        PriorMeta::Network(m) => PriorPolicy::Network(net("prior", m)?),
    };
    let mut policy = Policy::new(net("posterior", &header.posterior)?);
    policy.set_log_z(tensor("log_z")?.item()?);
    check_net(&policy.net, &env)?;
    if let PriorPolicy::Network(p) = &prior {
        check_net(p, &env)?;
    }

    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for &id in &header.adam_ids {
        first.insert(ParamId(id), tensor(&format!("adam.m.{id}"))?.into_values());
        second.insert(ParamId(id), tensor(&format!("adam.v.{id}"))?.into_values());
    }
    let adam = AdamState::from_parts(header.adam_t, first, second);

    let mut positives = PositiveBuffer::new(cfg.capacity_pos)?;
    let mut negatives = NegativeBuffer::new(cfg.capacity_neg)?;
    for i in 0..header.positives + header.negatives {
        let entry = read_entry(&mut r, &env)?;
        if i < header.positives {
            if !positives.push(entry)? {
                return Err(Error::Checkpoint("positive buffer entry was not accepted".into()));
            }
        } else {
            negatives.push(entry)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Trainer {
        cfg,
        env,
        policy,
        prior,
        adam,
        positives,
        negatives,
        step: header.step,
    })
}

fn check_net(net: &PolicyNet, env: &Env) -> Result<()> {
    if net.kind != env.kind() || net.mlp.output_dim() != env.n_actions() {
        return Err(Error::Checkpoint("network does not match the stored environment".into()));
    }
    Ok(())
}

fn read_entry(r: &mut Reader<'_>, env: &Env) -> Result<BufferEntry> {
    let step = r.u64("buffer entry")?;
    let n = r.u32("buffer entry")? as usize;
    let raw = r.take(
        n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry length overflows".into()))?,
        "buffer entry",
    )?;
    let actions: Vec<usize> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let traj = env
        .trajectory_from_actions(&actions)
        .map_err(|e| Error::Checkpoint(format!("stored trajectory does not replay: {e}")))?;
    Ok(BufferEntry::new(traj, step))
}
