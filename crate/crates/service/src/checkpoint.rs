//! `DNCK` binary container.
//!
//! ```text
//! "DNCK" | version u32 | header_len u32 | header (UTF-8 JSON) | count u32 |
//!   count x { name_len u32 | name | rank u32 | dims u32[rank] | f32[prod(dims)] }
//! ```
//!
//! All integers and floats are little-endian. Model checkpoints carry the
//! architecture config as header; DDIM state dumps carry
//! `{"kind": "ddim_state", "k": ..}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use dragnoise_core::tensor::Tensor;
use dragnoise_core::unet::{ArchConfig, UNet, UNetParams};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"DNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Header plus named tensors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = r.u32("header length")? as usize;
        let header = String::from_utf8(r.take(header_len, "header")?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!(
                    "`{name}` has rank {rank}"
                )));
            }
            let dims = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| {
                    CheckpointError::Corrupt(format!("`{name}` dims {dims:?} overflow"))
                })?;
            let raw = r.take(numel * 4, "tensor payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.encode())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn encode_model(net: &UNet<f32>) -> Vec<u8> {
    model_container(net).encode()
}

fn model_container(net: &UNet<f32>) -> Container {
    Container {
        header: serde_json::to_string(&net.config).expect("config serializes"),
        tensors: net
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<UNet<f32>> {
    let c = Container::decode(bytes)?;
    let config: ArchConfig = serde_json::from_str(&c.header)
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let mut map = BTreeMap::new();
    for (name, t) in c.tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!(
                "duplicate tensor `{name}`"
            )));
        }
    }
    let params = UNetParams::from_tensors(&config, map)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    UNet::new(config, params).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn save_checkpoint(net: &UNet<f32>, path: &Path) -> Result<()> {
    model_container(net).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<UNet<f32>> {
    decode_model(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    k: usize,
}

const STATE_KIND: &str = "ddim_state";
const STATE_TENSOR: &str = "z_t";

/// Inverted DDIM state `z_k`.
pub fn save_ddim_state(z: &Tensor<f32>, k: usize, path: &Path) -> Result<()> {
    let header = StateHeader {
        kind: STATE_KIND.into(),
        k,
    };
    Container {
        header: serde_json::to_string(&header).expect("header serializes"),
        tensors: vec![(STATE_TENSOR.into(), z.clone())],
    }
    .save(path)
}

pub fn load_ddim_state(path: &Path) -> Result<(Tensor<f32>, usize)> {
    let c = Container::load(path)?;
    let header: StateHeader = serde_json::from_str(&c.header)
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.kind != STATE_KIND {
        return Err(CheckpointError::Corrupt(format!(
            "expected a {STATE_KIND} file, got `{}`",
            header.kind
        )));
    }
    match c.tensors.into_iter().next() {
        Some((name, t)) if name == STATE_TENSOR => Ok((t, header.k)),
        _ => Err(CheckpointError::Corrupt(format!(
            "missing `{STATE_TENSOR}`"
        ))),
    }
}
