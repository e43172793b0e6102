//! Checkpoint container: named tensors plus JSON metadata, CRC-32 protected.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MSCK" | version u8 | meta_len u32 | meta JSON | count u32 |
//!   count × ( name_len u32 | name | byte_len u64 | tensor bytes ) |
//! crc32 u32 over everything before it
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusionNetwork, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Completed training iterations.
    pub iteration: usize,
    /// Per-channel input means (0..255 scale) used for normalization.
    pub means: [f64; 3],
    pub seed: u64,
    /// Original identity of each classifier output.
    pub label_ids: Vec<usize>,
}

/// Serialize a network and its metadata; fails on non-finite parameters.
pub fn encode_checkpoint(net: &FusionNetwork<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.config != *net.config() {
        return Err(Error::Checkpoint("metadata config differs from the network's".into()));
    }
    let state = net.state();
    if let Some((name, _)) = state.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Checkpoint(format!("parameter {name} is not finite")));
    }
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in &state {
        let bytes = t.to_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{what} runs past the end of the file")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("{what} too large")))
    }
}

/// Parse a checkpoint and rebuild the network it describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FusionNetwork<f32>, CheckpointMeta)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 1 + 4 {
        return Err(Error::CorruptCheckpoint(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CorruptCheckpoint(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = c.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = c.u32("tensor count")?;
    let mut state = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32("tensor name length")?;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let len = c.u64("tensor length")?;
        let t = Tensor::from_bytes(c.take(len, "tensor data")?)?;
        state.push((name, t));
    }
    if c.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }
    let mut net = FusionNetwork::new(&meta.config, meta.seed)?;
    if state.len() != net.state().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the {} model has {}",
            state.len(),
            meta.config.mode,
            net.state().len()
        )));
    }
    net.load_state(&state)?;
    Ok((net, meta))
}

/// Atomically write a checkpoint (temporary file, then rename). Returns its CRC-32.
pub fn save_checkpoint(path: &Path, net: &FusionNetwork<f32>, meta: &CheckpointMeta) -> Result<u32> {
    let bytes = encode_checkpoint(net, meta)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })?;
    Ok(checksum(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionNetwork<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// The stored CRC-32 of an encoded checkpoint.
pub fn checksum(bytes: &[u8]) -> u32 {
    let n = bytes.len();
    if n < 4 {
        return 0;
    }
    u32::from_le_bytes(bytes[n - 4..].try_into().expect("4 bytes"))
}
