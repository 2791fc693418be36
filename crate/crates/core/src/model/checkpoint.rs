//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "GRNCKPT\0"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen bytes (CheckpointHeader)
//! count    u32       number of arrays
//! repeated count times:
//!   nlen u32, name (utf-8), rows u32, cols u32, rows*cols scalars (raw LE bits)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Family, Middle, MiddleKind, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::layers::ReluLayer;
use crate::optimizer::OptimizerConfig;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"GRNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: NetworkConfig,
    pub init_scheme: String,
    pub optimizer: Option<OptimizerConfig>,
    pub layout: Vec<MiddleKind>,
    pub removed: Vec<bool>,
}

pub fn write_checkpoint<T: Scalar>(net: &Network<T>, optimizer: Option<&OptimizerConfig>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: net.config().clone(),
        init_scheme: super::InitScheme::HeUniform.name(),
        optimizer: optimizer.cloned(),
        layout: net.layout(),
        removed: net.removed.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let arrays = net.arrays();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.0 as u32).to_le_bytes());
        out.extend_from_slice(&(a.shape.1 as u32).to_le_bytes());
        for &v in a.values {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, CheckpointHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Checkpoint("missing magic".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} values, loader expects {}",
            header.dtype,
            T::DTYPE
        )));
    }

    let mut net = skeleton::<T>(&header)?;
    let count = r.u32()? as usize;
    let mut slots = net.arrays_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "{count} arrays stored, architecture has {}",
            slots.len()
        )));
    }
    for slot in slots.iter_mut() {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if name != slot.name || shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "expected array {} {:?}, found {name} {:?}",
                slot.name, slot.shape, shape
            )));
        }
        let payload = r.take(shape.0 * shape.1 * T::BYTES)?;
        for (dst, chunk) in slot.values.iter_mut().zip(payload.chunks_exact(T::BYTES)) {
            *dst = T::read_le(chunk);
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((net, header))
}

/// Network with the header's structure; values are overwritten by the loader.
fn skeleton<T: Scalar>(h: &CheckpointHeader) -> Result<Network<T>> {
    let mut net = Network::build(h.config.clone())?;
    let base = net.config().stage_count();
    let expected_kind = match h.config.family {
        Family::Classical => MiddleKind::Plain,
        Family::Resnet => MiddleKind::Residual,
        Family::Gresnet => MiddleKind::Gated,
    };
    if h.layout.len() < base || h.layout[..base].iter().any(|&k| k != expected_kind) {
        return Err(Error::Checkpoint("layout does not match the network config".into()));
    }
    for &kind in &h.layout[base..] {
        if kind != MiddleKind::Relu {
            return Err(Error::Checkpoint(format!("unexpected extra stage {kind:?}")));
        }
        net.middle.push(Middle::Relu(ReluLayer::identity(h.config.width)));
    }
    if h.removed.len() != h.layout.len() {
        return Err(Error::Checkpoint("removed mask length differs from layout".into()));
    }
    net.removed = h.removed.clone();
    Ok(net)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    net: &Network<T>,
    optimizer: Option<&OptimizerConfig>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(net, optimizer)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
